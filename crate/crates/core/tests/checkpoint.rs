mod common;

use std::path::Path;

use msgfm::numeric::Tensor;
use msgfm::training::checkpoint::{decode_table, encode_table};
use msgfm::training::{load_checkpoint, read_table, save_checkpoint, write_table, Checkpoint, Entry, Trainer};
use msgfm::Error;

use common::*;

/// Byte layout written out by hand.
fn hand_encoded() -> Vec<u8> {
    let mut b = b"MSGM".to_vec();
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&3u16.to_le_bytes());
    b.extend_from_slice(b"w.a");
    b.push(0);
    b.push(2);
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&1.5f32.to_le_bytes());
    b.extend_from_slice(&(-2.0f32).to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(b"t");
    b.push(2);
    b.push(1);
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(b"hi");
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

fn table() -> Vec<(String, Entry)> {
    vec![
        ("w.a".into(), Entry::F32(Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap())),
        ("t".into(), Entry::text("hi")),
    ]
}

#[test]
fn layout_matches_hand_encoding() {
    assert_eq!(encode_table(&table()).unwrap(), hand_encoded());
    assert_eq!(decode_table(&hand_encoded(), Path::new("x")).unwrap(), table());
}

#[test]
fn corruption_is_detected() {
    let good = hand_encoded();
    let p = Path::new("x");
    let mut flipped = good.clone();
    flipped[14] ^= 1;
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 2;
    for bad in [flipped, magic, version, good[..good.len() - 3].to_vec(), vec![]] {
        assert!(matches!(decode_table(&bad, p), Err(Error::Format { .. })));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(pair_dataset(8, 32, 1), tiny_model(), tiny_train(1, 0.5)).unwrap();
    t.step().unwrap();
    let ckpt = Checkpoint {
        model: t.model.clone(),
        train: t.train.clone(),
        registry: t.dataset.registry().canonical(),
        state: t.state.clone(),
    };
    let path = dir.path().join("a.msgm");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    let names: Vec<String> = read_table(&path).unwrap().into_iter().map(|(n, _)| n).collect();
    for prefix in ["meta.", "rng.", "param.", "adam.m.", "adam.v."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{}", prefix);
    }

    // A table without the required entries is not a checkpoint.
    let other = dir.path().join("b.msgm");
    write_table(&other, &table()).unwrap();
    assert!(load_checkpoint(&other).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}
