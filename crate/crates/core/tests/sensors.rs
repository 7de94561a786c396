mod common;

use std::fs;

use msgfm::sensors::{gen_synthetic, load_manifest, save_manifest, SensorRegistry, SensorSpec, SyntheticConfig};
use msgfm::Error;

use common::*;

#[test]
fn registry_rejects_bad_specs() {
    let bad: Vec<Vec<SensorSpec>> = vec![
        vec![],
        vec![SensorSpec::new(0, "a", 1), SensorSpec::new(0, "b", 1)],
        vec![SensorSpec::new(1, "a", 1)],
        vec![SensorSpec::new(0, "a", 0)],
        vec![SensorSpec::new(0, "a b", 1)],
        vec![SensorSpec::new(0, "a", 2).with_stats(vec![0.0], vec![1.0])],
        vec![SensorSpec::new(0, "a", 1).with_stats(vec![0.0], vec![0.0])],
        vec![SensorSpec::new(0, "a", 1).paired(0)],
        vec![SensorSpec::new(0, "a", 1).paired(1), SensorSpec::new(1, "b", 1)],
        vec![SensorSpec::new(0, "a", 1).paired(3), SensorSpec::new(1, "b", 1)],
        vec![SensorSpec::new(0, "a", 1), SensorSpec::new(1, "a", 1)],
    ];
    for specs in bad {
        assert!(matches!(SensorRegistry::new(specs.clone()), Err(Error::Registry(_))), "{:?}", specs);
    }
}

#[test]
fn synthetic_pairs_are_colocated() {
    let d = pair_dataset(6, 16, 3);
    assert_eq!(d.samples().len(), 12);
    assert_eq!(d.paired_count(), 12);
    for i in 0..d.samples().len() {
        let p = d.partner_of(i).unwrap();
        assert_eq!(d.partner_of(p), Some(i));
        assert_ne!(d.sample(i).sensor_id, d.sample(p).sensor_id);
    }
    assert_eq!(d, pair_dataset(6, 16, 3));
    assert_ne!(d, pair_dataset(6, 16, 4));
}

#[test]
fn synthetic_respects_declared_statistics() {
    let reg = pair_registry();
    let cfg = SyntheticConfig {
        n_per_sensor: 64,
        width: 32,
        height: 32,
        seed: 1,
        smoothing: 2.0,
        patch_multiple: 4,
    };
    let d = gen_synthetic(&reg, &cfg).unwrap();
    for spec in reg.iter() {
        for c in 0..spec.channels {
            let vals: Vec<f64> = d
                .sensor_indices(spec.sensor_id)
                .iter()
                .flat_map(|&i| d.sample(i).image[c * 1024..(c + 1) * 1024].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            let (m0, s0) = (spec.norm_mean[c] as f64, spec.norm_std[c] as f64);
            assert!((mean - m0).abs() < 0.35 * s0, "{} ch {}: mean {} vs {}", spec.name, c, mean, m0);
            assert!((sd / s0 - 1.0).abs() < 0.35, "{} ch {}: std {} vs {}", spec.name, c, sd, s0);
        }
    }
    let bad = SyntheticConfig { width: 30, ..cfg.clone() };
    assert!(matches!(gen_synthetic(&reg, &bad), Err(Error::Divisibility { .. })));
    let empty = SyntheticConfig { n_per_sensor: 0, ..cfg };
    assert!(gen_synthetic(&reg, &empty).is_err());
}

#[test]
fn select_and_unpair() {
    let d = pair_dataset(4, 16, 0);
    let only_s2 = d.select_sensors(&[1]).unwrap();
    assert_eq!(only_s2.registry().len(), 1);
    assert_eq!(only_s2.registry().get(0).unwrap().name, "s2");
    assert_eq!(only_s2.paired_count(), 0);
    let unpaired = d.without_pairing();
    assert_eq!(unpaired.paired_count(), 0);
    assert!(unpaired.registry().pairs().is_empty());
    assert!(d.select_sensors(&[5]).is_err());
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = pair_dataset(3, 16, 0);
    let files = save_manifest(&d, dir.path()).unwrap();
    assert!(!files.is_empty());
    assert_eq!(load_manifest(dir.path()).unwrap(), d);
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("MSGFM-DATA v1\n"));

    let write = |t: &str| {
        let sub = tempfile::tempdir().unwrap();
        for f in fs::read_dir(dir.path()).unwrap() {
            let f = f.unwrap().path();
            if f.is_dir() {
                let to = sub.path().join(f.file_name().unwrap());
                fs::create_dir(&to).unwrap();
                for g in fs::read_dir(&f).unwrap() {
                    let g = g.unwrap().path();
                    fs::copy(&g, to.join(g.file_name().unwrap())).unwrap();
                }
            }
        }
        fs::write(sub.path().join("manifest.txt"), t).unwrap();
        sub
    };
    let cases = [
        text.replace("MSGFM-DATA v1", "MSGFM-DATA v9"),
        text.replace("MSGFM-DATA v1", "hello"),
        text.lines().filter(|l| !l.starts_with("end")).collect::<Vec<_>>().join("\n"),
        text.replace("end samples=6", "end samples=7"),
        text.replacen("sample ", "bogus ", 1),
    ];
    for bad in cases {
        let sub = write(&bad);
        assert!(matches!(load_manifest(sub.path()), Err(Error::Format { .. })), "{}", bad);
    }
    assert!(matches!(load_manifest(&dir.path().join("nope")), Err(Error::Io { .. })));
}
