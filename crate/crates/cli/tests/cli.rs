use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.n_per_sensor=4",
    "--set",
    "train.base_batch=2",
    "--set",
    "encoder.num_experts=2",
];

fn msgfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgfm"))
        .args(args)
        .env("MSGFM_THREADS", "2")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = msgfm(args);
    assert_eq!(code(&o), 0, "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&with_small(&["gen-data", "--out", p(dir)]));
}

#[test]
fn gen_data_writes_every_sensor() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let stdout = ok(&with_small(&["gen-data", "--out", p(&a)]));
    assert!(stdout.contains("pairs: 2"), "{}", stdout);
    for name in ["sar", "s2", "dsm", "rgb"] {
        assert!(a.join(name).is_dir(), "{}", name);
    }
    assert!(a.join("manifest.txt").is_file());
    assert!(a.join("config.resolved.txt").is_file());
    let outputs: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("outputs.json")).unwrap()).unwrap();
    assert_eq!(outputs["command"], "gen-data");

    let b = tmp.path().join("b");
    gen(&b);
    for f in ["manifest.txt", "sar/data.bin", "rgb/data.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    assert_eq!(code(&msgfm(&["gen-data", "--out", out, "--set", "data.n_per_sensor=0"])), 2);
    assert_eq!(code(&msgfm(&["gen-data", "--out", out, "--set", "no.such.key=1"])), 2);
    assert_eq!(code(&msgfm(&["gen-data", "--out", out, "--set", "model.patch_size=5"])), 2);
    assert_eq!(code(&msgfm(&["ablate", "--out", out, "--grid", ""])), 2);
    assert_eq!(code(&msgfm(&["ablate", "--out", out, "--grid", "moe=2"])), 2);
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = msgfm(&["pretrain", "--out", p(tmp.path()), "--data", p(&tmp.path().join("nothing"))]);
    assert_eq!(code(&o), 3);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn pretrain_resume_and_downstream_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let d = p(&data);
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    ok(&with_small(&["pretrain", "--out", p(&full), "--data", d, "--set", "train.epochs=4"]));
    ok(&with_small(&["pretrain", "--out", p(&half), "--data", d, "--set", "train.epochs=2"]));
    let resume = half.join("final.msgm");
    ok(&with_small(&[
        "pretrain",
        "--out",
        p(&rest),
        "--data",
        d,
        "--set",
        "train.epochs=4",
        "--resume",
        p(&resume),
    ]));
    let log = |dir: &Path| fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let whole: Vec<String> = log(&full).lines().map(String::from).collect();
    let joined: Vec<String> = log(&half).lines().chain(log(&rest).lines()).map(String::from).collect();
    assert_eq!(whole.len(), 8);
    assert_eq!(whole, joined);
    assert_eq!(fs::read(full.join("final.msgm")).unwrap(), fs::read(rest.join("final.msgm")).unwrap());
    for line in &whole {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    let ckpt = full.join("final.msgm");
    let ft = tmp.path().join("ft");
    let table = ok(&with_small(&["finetune", "--out", p(&ft), "--data", d, "--checkpoint", p(&ckpt), "--set", "transfer.steps=3"]));
    assert!(table.contains("MAP"), "{}", table);
    let ev = tmp.path().join("ev");
    ok(&with_small(&[
        "evaluate",
        "--out",
        p(&ev),
        "--checkpoint",
        p(&ckpt),
        "--head",
        p(&ft.join("head.msgm")),
        "--data",
        d,
    ]));
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(a["values"], b["multilabel"]["values"]);

    let rec = tmp.path().join("rec");
    let out = ok(&with_small(&[
        "reconstruct",
        "--out",
        p(&rec),
        "--data",
        d,
        "--checkpoint",
        p(&ckpt),
        "--sensor",
        "dsm",
        "--cross",
        "--count",
        "3",
    ]));
    assert!(out.contains("dsm_to_rgb"), "{}", out);
    let ppm = fs::read(rec.join("dsm_to_rgb.ppm")).unwrap();
    // Three 32-px rows with 2-px gaps, three 32-px columns.
    assert!(ppm.starts_with(b"P6\n100 100\n255\n"));
    assert!(rec.join("dsm_to_rgb.png").is_file());
    let sar = tmp.path().join("sar");
    ok(&with_small(&["reconstruct", "--out", p(&sar), "--data", d, "--checkpoint", p(&ckpt), "--sensor", "sar"]));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(sar.join("sar_to_sar_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["samples"][0]["bands"].as_array().unwrap().len(), 2);

    // A checkpoint from other sensors does not fit this data.
    let other = tmp.path().join("other");
    ok(&with_small(&["gen-data", "--out", p(&other), "--set", "sensors.count=2"]));
    let o = msgfm(&with_small(&["reconstruct", "--out", p(&tmp.path().join("x")), "--data", p(&other), "--checkpoint", p(&ckpt)]));
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn evaluate_identical_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let ev = tmp.path().join("ev");
    let table = ok(&["evaluate", "--out", p(&ev), "--pred", p(&data), "--gt", p(&data)]);
    assert!(table.contains("inf"), "{}", table);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    for sensor in ["sar", "s2", "dsm", "rgb"] {
        assert_eq!(r[sensor]["values"]["ssim"].as_f64().unwrap(), 1.0);
        assert_eq!(r[sensor]["values"]["mae"].as_f64().unwrap(), 0.0);
        assert_eq!(r[sensor]["values"]["psnr"], "inf");
    }
    assert!(ev.join("report.txt").is_file());
}

#[test]
fn ablate_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let table = ok(&with_small(&[
        "ablate",
        "--out",
        p(&out),
        "--grid",
        "moe=0,1;cross=0,0.5,1.0",
        "--set",
        "ablation.steps=2",
        "--set",
        "ablation.finetune_steps=2",
        "--set",
        "transfer.batch=2",
    ]));
    let rows = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 6, "{}", rows);
    assert_eq!(rows.lines().filter(|l| l.contains("50%")).count(), 2);
    assert!(table.contains("MIM_CROSS"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 6);
}
