//! Binary checkpoint: `MSGM`, u32 LE version, a named-tensor table and a
//! trailing CRC32 of everything before it.
//!
//! Each table entry is `u16` name length, UTF-8 name, `u8` dtype code
//! (0 = f32, 1 = f64, 2 = u8), `u8` ndim, `ndim × u32` dims and the raw
//! little-endian payload. Entries run until the CRC.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::AdamW;
use super::step::{RngStreams, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::numeric::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MSGM";
pub const VERSION: u32 = 1;

/// One table entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Vec<usize>, Vec<u8>),
}

impl Entry {
    pub fn bytes(data: &[u8]) -> Entry {
        Entry::U8(vec![data.len()], data.to_vec())
    }

    pub fn text(s: &str) -> Entry {
        Entry::bytes(s.as_bytes())
    }

    pub fn u64(x: u64) -> Entry {
        Entry::bytes(&x.to_le_bytes())
    }

    fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::U8(s, _) => s,
        }
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

/// Serialize a tensor table.
pub fn encode_table(entries: &[(String, Entry)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, e) in entries {
        let nb = name.as_bytes();
        let shape = e.shape();
        if nb.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("cannot encode entry `{}`", name)));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        let code = match e {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::U8(..) => DType::U8,
        };
        out.push(code as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension of `{}` too large", name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match e {
            Entry::F32(t) => put_tensor(&mut out, t),
            Entry::F64(t) => put_tensor(&mut out, t),
            Entry::U8(_, d) => out.extend_from_slice(d),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated tensor table"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parse a tensor table, checking magic, version and CRC.
pub fn decode_table(bytes: &[u8], path: &Path) -> Result<Vec<(String, Entry)>> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", version)));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::format(path, "checksum mismatch (corrupt or truncated)"));
    }
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 8,
        path,
    };
    let mut out = Vec::new();
    while r.pos < body_end {
        let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(path, format!("unknown dtype {}", code)))?;
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload = r.take(numel(&shape) * dtype.size())?;
        let e = match dtype {
            DType::F32 => Entry::F32(Tensor::new(shape, payload.chunks(4).map(f32::read_le).collect())?),
            DType::F64 => Entry::F64(Tensor::new(shape, payload.chunks(8).map(f64::read_le).collect())?),
            DType::U8 => Entry::U8(shape, payload.to_vec()),
        };
        out.push((name, e));
    }
    Ok(out)
}

pub fn write_table(path: &Path, entries: &[(String, Entry)]) -> Result<()> {
    let bytes = encode_table(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Vec<(String, Entry)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_table(&bytes, path)
}

fn rng_bytes(r: &ChaCha8Rng) -> Vec<u8> {
    let mut b = r.get_seed().to_vec();
    b.extend_from_slice(&r.get_stream().to_le_bytes());
    b.extend_from_slice(&r.get_word_pos().to_le_bytes());
    b
}

fn rng_from(bytes: &[u8], path: &Path) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if bytes.len() != 56 {
        return Err(Error::format(path, "bad rng entry"));
    }
    let mut r = ChaCha8Rng::from_seed(bytes[..32].try_into().unwrap());
    r.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    r.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(r)
}

/// A saved run: configs, the sensor registry it was trained on, and state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Canonical text of the sensor registry.
    pub registry: String,
    pub state: TrainState,
}

fn store_entries(prefix: &str, store: &ParamStore<f32>, out: &mut Vec<(String, Entry)>) {
    for (name, t) in store.iter() {
        out.push((format!("{}{}", prefix, name), Entry::F32(t.clone())));
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let s = &ckpt.state;
    let mut e: Vec<(String, Entry)> = vec![
        ("meta.model".into(), Entry::text(&ckpt.model.to_text())),
        ("meta.train".into(), Entry::text(&ckpt.train.to_text())),
        ("meta.registry".into(), Entry::text(&ckpt.registry)),
        ("meta.step".into(), Entry::u64(s.step as u64)),
        ("meta.adam_t".into(), Entry::u64(s.optimizer.t)),
        ("meta.data_seed".into(), Entry::u64(s.rngs.data_seed)),
        ("rng.mask".into(), Entry::bytes(&rng_bytes(&s.rngs.mask))),
        ("rng.routing".into(), Entry::bytes(&rng_bytes(&s.rngs.routing))),
        ("rng.init".into(), Entry::bytes(&rng_bytes(&s.rngs.init))),
        (
            "meta.history".into(),
            Entry::F64(Tensor::new(vec![s.history.len()], s.history.clone())?),
        ),
    ];
    store_entries("param.", &s.params, &mut e);
    store_entries("adam.m.", &s.optimizer.m, &mut e);
    store_entries("adam.v.", &s.optimizer.v, &mut e);
    write_table(path, &e)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let table: BTreeMap<String, Entry> = read_table(path)?.into_iter().collect();
    let bytes = |name: &str| -> Result<&[u8]> {
        match table.get(name) {
            Some(Entry::U8(_, d)) => Ok(d),
            _ => Err(Error::format(path, format!("missing entry `{}`", name))),
        }
    };
    let text = |name: &str| -> Result<String> {
        String::from_utf8(bytes(name)?.to_vec()).map_err(|_| Error::format(path, format!("`{}` is not UTF-8", name)))
    };
    let u64_of = |name: &str| -> Result<u64> {
        let b = bytes(name)?;
        Ok(u64::from_le_bytes(
            b.try_into().map_err(|_| Error::format(path, format!("bad `{}`", name)))?,
        ))
    };
    let history = match table.get("meta.history") {
        Some(Entry::F64(t)) => t.data().to_vec(),
        _ => return Err(Error::format(path, "missing entry `meta.history`")),
    };
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (name, e) in &table {
        let Entry::F32(t) = e else { continue };
        if let Some(n) = name.strip_prefix("param.") {
            params.insert(n, t.clone());
        } else if let Some(n) = name.strip_prefix("adam.m.") {
            m.insert(n, t.clone());
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            v.insert(n, t.clone());
        }
    }
    let model = ModelConfig::from_text(&text("meta.model")?)?;
    let train = TrainConfig::from_text(&text("meta.train")?)?;
    let mut optimizer = AdamW::new(train.beta1, train.beta2, train.eps, train.weight_decay);
    optimizer.t = u64_of("meta.adam_t")?;
    optimizer.m = m;
    optimizer.v = v;
    let state = TrainState {
        step: u64_of("meta.step")? as usize,
        params,
        optimizer,
        rngs: RngStreams {
            data_seed: u64_of("meta.data_seed")?,
            mask: rng_from(bytes("rng.mask")?, path)?,
            routing: rng_from(bytes("rng.routing")?, path)?,
            init: rng_from(bytes("rng.init")?, path)?,
        },
        history,
    };
    Ok(Checkpoint {
        model,
        train,
        registry: text("meta.registry")?,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let entries = vec![
            ("a".to_string(), Entry::F32(Tensor::from_f32(&[2, 1], &[1.5, -0.0]).unwrap())),
            ("b".to_string(), Entry::F64(Tensor::from_f64(&[1], &[f64::MIN_POSITIVE]).unwrap())),
            ("c".to_string(), Entry::text("hello")),
        ];
        write_table(&path, &entries).unwrap();
        assert_eq!(read_table(&path).unwrap(), entries);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(read_table(&path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_table(&path).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(read_table(&path).unwrap_err().to_string().contains("version"));
    }
}
