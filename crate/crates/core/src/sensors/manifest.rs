//! Text manifest plus one little-endian f32 blob per sensor.
//!
//! ```text
//! MSGFM-DATA v1
//! sensor <id> <name> channels=<c> paired=<id|-> mean=<f,..> std=<f,..> blob=<name>/data.bin
//! sample <id> sensor=<sid> size=<w>x<h> partner=<id|-> offset=<byte offset> count=<floats>
//! end samples=<n>
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, SampleRecord, SensorRegistry, SensorSpec};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "MSGFM-DATA v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
const BLOB_FILE: &str = "data.bin";

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn join_floats(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Write `dir/manifest.txt` and `dir/<sensor>/data.bin`. Returns the files written.
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let registry = dataset.registry();
    let mut text = String::new();
    text.push_str(MANIFEST_HEADER);
    text.push('\n');
    for s in registry.iter() {
        text.push_str(&format!(
            "sensor {} {} channels={} paired={} mean={} std={} blob={}/{}\n",
            s.sensor_id,
            s.name,
            s.channels,
            s.paired_with.map_or("-".into(), |p| p.to_string()),
            join_floats(&s.norm_mean),
            join_floats(&s.norm_std),
            s.name,
            BLOB_FILE
        ));
    }
    let mut blobs: Vec<Vec<u8>> = vec![Vec::new(); registry.len()];
    for s in dataset.samples() {
        let blob = &mut blobs[s.sensor_id];
        text.push_str(&format!(
            "sample {} sensor={} size={}x{} partner={} offset={} count={}\n",
            s.sample_id,
            s.sensor_id,
            s.width,
            s.height,
            s.partner_sample_id.map_or("-".into(), |p| p.to_string()),
            blob.len(),
            s.image.len()
        ));
        for v in &s.image {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    text.push_str(&format!("end samples={}\n", dataset.samples().len()));

    let mut written = Vec::new();
    for (s, blob) in registry.iter().zip(&blobs) {
        let sub = dir.join(&s.name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let path = sub.join(BLOB_FILE);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    written.insert(0, path);
    Ok(written)
}

struct Fields<'a> {
    map: HashMap<&'a str, &'a str>,
    line: usize,
    path: &'a Path,
}

impl<'a> Fields<'a> {
    fn parse(tokens: &[&'a str], line: usize, path: &'a Path) -> Result<Self> {
        let mut map = HashMap::new();
        for t in tokens {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value, got `{}`", line, t)))?;
            map.insert(k, v);
        }
        Ok(Fields { map, line, path })
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(self.path, format!("line {}: missing `{}`", self.line, key)))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::format(self.path, format!("line {}: bad {} `{}`", self.line, key, v)))
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key)? {
            "-" => Ok(None),
            _ => self.num(key).map(Some),
        }
    }

    fn floats(&self, key: &str) -> Result<Vec<f32>> {
        self.get(key)?
            .split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| Error::format(self.path, format!("line {}: bad float `{}`", self.line, x)))
            })
            .collect()
    }
}

/// Read a dataset written by [`save_manifest`]. `path` may be the directory or the manifest file.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let root = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines().enumerate();

    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != MANIFEST_HEADER {
        if let Some(v) = header.strip_prefix("MSGFM-DATA ") {
            return Err(Error::format(&mpath, format!("unsupported manifest version `{}`", v)));
        }
        return Err(Error::format(&mpath, "missing MSGFM-DATA header"));
    }

    let mut specs: Vec<SensorSpec> = Vec::new();
    let mut blob_paths: Vec<PathBuf> = Vec::new();
    let mut rows: Vec<(SampleRecord, usize)> = Vec::new();
    let mut ended = None;
    for (i, line) in lines {
        let lineno = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            None => continue,
            Some("sensor") if tokens.len() >= 3 => {
                let f = Fields::parse(&tokens[3..], lineno, &mpath)?;
                let sensor_id: usize = tokens[1]
                    .parse()
                    .map_err(|_| Error::format(&mpath, format!("line {}: bad sensor id", lineno)))?;
                specs.push(SensorSpec {
                    sensor_id,
                    name: tokens[2].to_string(),
                    channels: f.num("channels")?,
                    paired_with: f.opt_num("paired")?,
                    norm_mean: f.floats("mean")?,
                    norm_std: f.floats("std")?,
                });
                let blob = f.get("blob")?;
                if blob.contains("..") || Path::new(blob).is_absolute() {
                    return Err(Error::format(&mpath, format!("line {}: blob path escapes dataset", lineno)));
                }
                blob_paths.push(root.join(blob));
            }
            Some("sample") if tokens.len() >= 2 => {
                let f = Fields::parse(&tokens[2..], lineno, &mpath)?;
                let sample_id: u64 = tokens[1]
                    .parse()
                    .map_err(|_| Error::format(&mpath, format!("line {}: bad sample id", lineno)))?;
                let size = f.get("size")?;
                let (w, h) = size
                    .split_once('x')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::format(&mpath, format!("line {}: bad size `{}`", lineno, size)))?;
                let count: usize = f.num("count")?;
                let offset: usize = f.num("offset")?;
                rows.push((
                    SampleRecord {
                        sample_id,
                        sensor_id: f.num("sensor")?,
                        width: w,
                        height: h,
                        image: vec![0.0; count],
                        partner_sample_id: f.opt_num("partner")?,
                    },
                    offset,
                ));
            }
            Some("end") => {
                let f = Fields::parse(&tokens[1..], lineno, &mpath)?;
                ended = Some(f.num::<usize>("samples")?);
                break;
            }
            Some(other) => {
                return Err(Error::format(&mpath, format!("line {}: unexpected `{}`", lineno, other)));
            }
        }
    }
    match ended {
        None => return Err(Error::format(&mpath, "truncated manifest (no end line)")),
        Some(n) if n != rows.len() => {
            return Err(Error::format(&mpath, format!("end line declares {} samples, found {}", n, rows.len())))
        }
        _ => {}
    }

    let registry = SensorRegistry::new(specs)?;
    let mut blobs = Vec::with_capacity(blob_paths.len());
    for p in &blob_paths {
        blobs.push(fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    let mut used = vec![0usize; blobs.len()];
    let mut samples = Vec::with_capacity(rows.len());
    for (mut rec, offset) in rows {
        let blob = blobs
            .get(rec.sensor_id)
            .ok_or_else(|| Error::Dataset(format!("sample {} has unknown sensor {}", rec.sample_id, rec.sensor_id)))?;
        let end = offset + rec.image.len() * 4;
        if end > blob.len() {
            return Err(Error::format(
                &blob_paths[rec.sensor_id],
                format!("truncated blob: sample {} needs bytes {}..{}, have {}", rec.sample_id, offset, end, blob.len()),
            ));
        }
        for (k, v) in rec.image.iter_mut().enumerate() {
            let at = offset + 4 * k;
            *v = f32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
        }
        used[rec.sensor_id] += rec.image.len() * 4;
        samples.push(rec);
    }
    for (i, (&u, b)) in used.iter().zip(&blobs).enumerate() {
        if u != b.len() {
            return Err(Error::format(&blob_paths[i], format!("blob holds {} bytes, manifest accounts for {}", b.len(), u)));
        }
    }
    Dataset::new(registry, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::{gen_synthetic, register_sensors, SyntheticConfig};

    fn dataset() -> Dataset {
        let reg = register_sensors(vec![
            SensorSpec::new(0, "a", 2).paired(1).with_stats(vec![1.5, -0.25], vec![0.3, 2.0]),
            SensorSpec::new(1, "b", 3).paired(0),
            SensorSpec::new(2, "c", 1),
        ])
        .unwrap();
        gen_synthetic(
            &reg,
            &SyntheticConfig {
                n_per_sensor: 3,
                width: 8,
                height: 4,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        let files = save_manifest(&ds, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(ds, back);
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert!(a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replacen("MSGFM-DATA", "MSGFX-DATA", 1)).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Format { .. })));
        fs::write(&p, text.replacen("v1", "v2", 1)).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        fs::write(&p, cut).unwrap();
        assert!(load_manifest(dir.path()).is_err());

        fs::write(&p, &text).unwrap();
        let blob = dir.path().join("c").join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn missing_partner_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replacen("partner=3", "partner=99", 1)).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing partner"), "{err}");
    }
}
