use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use msgfm::ablation::{ablation_json, format_ablation, parse_grid, run_ablation};
use msgfm::config::RunConfig;
use msgfm::metrics::format_table;
use msgfm::render::{band_statistics, reconstruct, render_grid, write_png, write_ppm};
use msgfm::sensors::{gen_synthetic, load_manifest, save_manifest, Dataset};
use msgfm::training::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use msgfm::transfer::{compare_datasets, load_head, make_task, save_head, FinetuneModel, HeadFile};
use msgfm::Error;

const RESOLVED_CONFIG: &str = "config.resolved.txt";
const OUTPUTS: &str = "outputs.json";

#[derive(Parser)]
#[command(name = "msgfm", version, about = "Multisensor masked image modeling at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multisensor dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-sensor masked pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pretrain and evaluate every cell of a MoE × cross-rate grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        /// Dataset to use; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a task head on top of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a fine-tuned head, or compare prediction and ground-truth datasets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["head", "data"], conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Render masked input, reconstruction and ground truth.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source sensor name (default: the first sensor).
        #[arg(long)]
        sensor: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Decode into the partner sensor instead of the source.
        #[arg(long)]
        cross: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Files written by one command, listed in `outputs.json`.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.add(p.clone());
        Ok(p)
    }

    fn finish(mut self, command: &str) -> Result<()> {
        let rel: Vec<String> = self
            .files
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        let text = serde_json::to_string_pretty(&json!({ "command": command, "files": rel }))?;
        self.write(OUTPUTS, text.as_bytes())?;
        self.files.clear();
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Config echo first, before any heavy work.
fn start(common: &Common) -> Result<(RunConfig, Outputs)> {
    let cfg = load_config(common)?;
    let mut out = Outputs::new(&common.out)?;
    out.write(RESOLVED_CONFIG, cfg.to_text().as_bytes())?;
    Ok((cfg, out))
}

fn load_data(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such data directory")).into());
    }
    Ok(load_manifest(path)?)
}

fn check_registry(found: &str, dataset: &Dataset, what: &str) -> Result<()> {
    let expected = dataset.registry().canonical();
    if found != expected {
        return Err(Error::Incompatible(format!(
            "{} was trained on sensors [{}], data has [{}]",
            what, found, expected
        ))
        .into());
    }
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let (cfg, mut out) = start(common)?;
    let registry = cfg.registry()?;
    let dataset = gen_synthetic(&registry, &cfg.synthetic())?;
    for p in save_manifest(&dataset, &common.out)? {
        out.add(p);
    }
    for s in registry.iter() {
        println!(
            "{:<8} {:>2} channels  {:>5} samples  partner {}",
            s.name,
            s.channels,
            dataset.sensor_indices(s.sensor_id).len(),
            s.paired_with
                .map_or("-".to_string(), |p| registry.get(p).unwrap().name.clone())
        );
    }
    println!(
        "pairs: {}  paired samples: {} of {}",
        registry.pairs().len(),
        dataset.paired_count(),
        dataset.samples().len()
    );
    out.finish("gen-data")
}

fn pretrain(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let (cfg, mut out) = start(common)?;
    let dataset = load_data(data)?;
    if cfg.registry()?.canonical() != dataset.registry().canonical() {
        return Err(Error::Incompatible("config sensors differ from the dataset's".into()).into());
    }
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_registry(&ckpt.registry, &dataset, "checkpoint")?;
            if ckpt.model != cfg.model {
                return Err(Error::Incompatible("checkpoint model config differs from the run config".into()).into());
            }
            Trainer::from_state(dataset, cfg.model.clone(), cfg.train.clone(), ckpt.state)?
        }
        None => Trainer::new(dataset, cfg.model.clone(), cfg.train.clone())?,
    };
    let registry = trainer.dataset.registry().canonical();
    let spe = trainer.steps_per_epoch();
    let total = trainer.total_steps();
    let log_path = out.path("metrics.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    out.add(log_path.clone());
    let save = |trainer: &Trainer, out: &mut Outputs, name: &str| -> Result<()> {
        let path = out.path(name);
        save_checkpoint(
            &Checkpoint {
                model: trainer.model.clone(),
                train: trainer.train.clone(),
                registry: registry.clone(),
                state: trainer.state.clone(),
            },
            &path,
        )?;
        out.add(path);
        Ok(())
    };
    let started = std::time::Instant::now();
    while trainer.state.step < total {
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e @ Error::NonFinite(_)) => {
                log.flush().ok();
                let dump = out.path(&format!("nonfinite_step{}.msgm", trainer.state.step));
                save_checkpoint(
                    &Checkpoint {
                        model: trainer.model.clone(),
                        train: trainer.train.clone(),
                        registry: registry.clone(),
                        state: trainer.state.clone(),
                    },
                    &dump,
                )?;
                out.add(dump.clone());
                out.finish("pretrain")?;
                eprintln!("diagnostic dump: {}", dump.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        let done = trainer.state.step;
        if done % spe == 0 {
            let epoch = done / spe;
            eprintln!(
                "[{:>8.1}s] epoch {} step {} loss {:.5}",
                started.elapsed().as_secs_f64(),
                epoch,
                done,
                m.loss
            );
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && done < total {
                save(&trainer, &mut out, &format!("epoch{:04}.msgm", epoch))?;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&trainer, &mut out, "final.msgm")?;
    out.finish("pretrain")
}

fn ablate(common: &Common, grid: &str, data: Option<&Path>) -> Result<()> {
    let (cfg, mut out) = start(common)?;
    let cells = parse_grid(grid, &cfg)?;
    let dataset = match data {
        Some(d) => load_data(d)?,
        None => gen_synthetic(&cfg.registry()?, &cfg.synthetic())?,
    };
    let rows = run_ablation(&cfg, &dataset, &cells, |r| {
        eprintln!("cell moe={} cross={} done", r.cell.moe, r.cell.p_cross)
    })?;
    let table = format_ablation(&rows);
    print!("{}", table);
    out.write("ablation.txt", table.as_bytes())?;
    out.write("ablation.json", serde_json::to_string_pretty(&ablation_json(&rows))?.as_bytes())?;
    out.finish("ablate")
}

fn finetune(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let (cfg, mut out) = start(common)?;
    cfg.transfer.validate()?;
    let dataset = load_data(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_registry(&ckpt.registry, &dataset, "checkpoint")?;
    let task = make_task(&dataset, &cfg.transfer)?;
    let mut model = FinetuneModel::new(ckpt.model, cfg.transfer.clone(), task.sensors.clone(), ckpt.state.params)?;
    let records = model.finetune(&task)?;
    let mut log = String::new();
    for r in &records {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    out.write("finetune.jsonl", log.as_bytes())?;
    let head = HeadFile {
        transfer: cfg.transfer.clone(),
        registry: dataset.registry().canonical(),
        params: model.head_params(),
    };
    let path = out.path("head.msgm");
    save_head(&head, &path)?;
    out.add(path);
    let report = model.evaluate(&task, &task.test)?;
    out.write("report.json", serde_json::to_string_pretty(&report.to_json())?.as_bytes())?;
    let cols: Vec<&str> = EVAL_COLUMNS
        .iter()
        .copied()
        .filter(|c| report.values.contains_key(*c))
        .collect();
    print!("{}", format_table(&[(cfg.transfer.head.clone(), report.clone())], &cols));
    out.finish("finetune")
}

/// Column order of evaluation tables.
const EVAL_COLUMNS: [&str; 6] = ["map", "mae", "sam", "ssim", "psnr", "miou"];

fn evaluate(
    common: &Common,
    checkpoint: Option<&Path>,
    head: Option<&Path>,
    data: Option<&Path>,
    pred: Option<&Path>,
    gt: Option<&Path>,
) -> Result<()> {
    let (_, mut out) = start(common)?;
    let rows = match (checkpoint, head, data, pred, gt) {
        (Some(c), Some(h), Some(d), None, None) => {
            let dataset = load_data(d)?;
            let ckpt = load_checkpoint(c)?;
            check_registry(&ckpt.registry, &dataset, "checkpoint")?;
            let head = load_head(h)?;
            check_registry(&head.registry, &dataset, "head")?;
            let task = make_task(&dataset, &head.transfer)?;
            let mut model = FinetuneModel::new(ckpt.model, head.transfer.clone(), task.sensors.clone(), ckpt.state.params)?;
            for (k, t) in head.params {
                model.params.insert(&k, t);
            }
            vec![(head.transfer.head.clone(), model.evaluate(&task, &task.test)?)]
        }
        (None, None, None, Some(p), Some(g)) => compare_datasets(&load_data(p)?, &load_data(g)?)?,
        _ => {
            return Err(Error::Config("evaluate needs --checkpoint, --head and --data, or --pred and --gt".into()).into())
        }
    };
    let reports: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(k, r)| (k.clone(), r.to_json())).collect();
    out.write("report.json", serde_json::to_string_pretty(&reports)?.as_bytes())?;
    let cols: Vec<&str> = EVAL_COLUMNS
        .iter()
        .copied()
        .filter(|c| rows.iter().any(|(_, r)| r.values.contains_key(*c)))
        .collect();
    let table = format_table(&rows, &cols);
    print!("{}", table);
    out.write("report.txt", table.as_bytes())?;
    out.finish("evaluate")
}

fn reconstruct_cmd(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    sensor: Option<&str>,
    count: usize,
    cross: bool,
    seed: u64,
) -> Result<()> {
    let (_, mut out) = start(common)?;
    let dataset = load_data(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_registry(&ckpt.registry, &dataset, "checkpoint")?;
    let reg = dataset.registry();
    let spec = match sensor {
        Some(n) => reg
            .by_name(n)
            .ok_or_else(|| Error::Config(format!("unknown sensor `{}`", n)))?,
        None => reg.get(0).unwrap(),
    };
    let mut indices: Vec<usize> = dataset.sensor_indices(spec.sensor_id).to_vec();
    if cross {
        indices.retain(|&i| dataset.partner_of(i).is_some());
    }
    indices.truncate(count.max(1));
    let rec = reconstruct(&ckpt.state.params, &ckpt.model, &dataset, &indices, cross, seed)?;
    let target = reg.get(rec.target_sensor).unwrap();
    let stem = format!("{}_to_{}", spec.name, target.name);
    let raster = render_grid(&rec);
    let ppm = out.path(&format!("{}.ppm", stem));
    write_ppm(&raster, &ppm)?;
    out.add(ppm);
    let png = out.path(&format!("{}.png", stem));
    write_png(&raster, &png)?;
    out.add(png);
    if target.channels == 2 {
        let stats = band_statistics(&rec, target)?;
        out.write(&format!("{}_stats.json", stem), serde_json::to_string_pretty(&stats)?.as_bytes())?;
    }
    println!("{} grid: {}x{} ({} samples)", stem, raster.width, raster.height, indices.len());
    out.finish("reconstruct")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data, resume } => pretrain(&common, &data, resume.as_deref()),
        Command::Ablate { common, grid, data } => ablate(&common, &grid, data.as_deref()),
        Command::Finetune {
            common,
            data,
            checkpoint,
        } => finetune(&common, &data, &checkpoint),
        Command::Evaluate {
            common,
            checkpoint,
            head,
            data,
            pred,
            gt,
        } => evaluate(
            &common,
            checkpoint.as_deref(),
            head.as_deref(),
            data.as_deref(),
            pred.as_deref(),
            gt.as_deref(),
        ),
        Command::Reconstruct {
            common,
            data,
            checkpoint,
            sensor,
            count,
            cross,
            seed,
        } => reconstruct_cmd(&common, &data, &checkpoint, sensor.as_deref(), count, cross, seed),
    }
}

/// 2 config, 3 I/O, 4 numeric, 5 compatibility, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::UnknownStrategy { .. } | Error::Divisibility { .. } | Error::Registry(_) => 2,
                Error::InvalidArgument(_) => 2,
                Error::Io { .. } | Error::Format { .. } | Error::Dataset(_) => 3,
                Error::NonFinite(_) => 4,
                Error::Incompatible(_) | Error::ChannelMismatch { .. } => 5,
                Error::ShapeMismatch { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MSGFM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("MSGFM_THREADS must be a positive integer, got `{}`", v)))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!(e))
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{}: {}", msg, c);
                }
            }
            eprintln!("error: {}", msg);
            ExitCode::from(exit_code(&e))
        }
    }
}
