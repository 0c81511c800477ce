use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdtnet::data::{generate_phantom, normalize_volume, partition_subjects, read_dataset, read_frame_png, write_dataset, DatasetSplit, Frame};
use sdtnet::evaluation::{compare_reports, encode_frame, evaluate, read_metrics_csv, render_factors, render_sequence, save_frame_png, synthesize_sequence};
use sdtnet::networks::NetworkBundle;
use sdtnet::training::{load_checkpoint, parallelism, runs_root, train, TrainingConfig, CONFIG_KEYS};
use sdtnet::Error;

/// Exit status and message of a failed command.
struct Failure {
    code: u8,
    message: String,
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const CHECKPOINT: u8 = 4;

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

/// Classifies by variant; configuration errors keep code 2 in every stage.
fn in_stage(code: u8) -> impl Fn(Error) -> Failure {
    move |e| {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => CONFIG,
            _ => code,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn config_help() -> String {
    let d = TrainingConfig::default();
    let mut s = String::from("Configuration keys (file lines `key = value`, or trailing `--key=value` overrides; `section.key` also accepted):\n");
    for k in CONFIG_KEYS {
        let name = if k.section.is_empty() { k.name.to_string() } else { format!("{}.{}", k.section, k.name) };
        let default = d.get(k.name).unwrap_or_default();
        s.push_str(&format!("  {name:<36} {:<18} {}\n", if default.is_empty() { "(unset)".into() } else { default }, k.help));
    }
    s
}

#[derive(Parser)]
#[command(name = "sdtnet", version, about = "Semi-supervised cardiac segmentation with a temporal transformer", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic contracting-heart dataset.
    Phantom {
        #[arg(long, default_value_t = 100)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset; trailing `--key=value` arguments override the config.
    #[command(after_help = config_help())]
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Reuse a non-empty run directory.
        #[arg(long)]
        force: bool,
        #[arg(skip)]
        overrides: Vec<(String, String)>,
    },
    /// Score a checkpoint on a split and write metrics.csv, summary.json and overlays.
    Eval {
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(short, long, default_value = "test")]
        split: String,
        /// Split file; defaults to split.json next to the checkpoint.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Another metrics.csv to compare against with paired Wilcoxon tests.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Synthesise a contraction from an ED frame with the modality code held fixed.
    Synthesize {
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        /// ED frame PNG; defaults to the ED frame of the first test subject of the run.
        #[arg(short, long)]
        image: Option<PathBuf>,
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long, default_value_t = 7)]
        frames: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Render the image and its binary anatomy factors as a tile panel.
    Factors {
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        image: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Moves `--key=value` arguments naming config keys out of the `train`
/// command line so clap only sees its own flags.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    if args.get(1).map(String::as_str) != Some("train") {
        return (args, Vec::new());
    }
    const OWN: [&str; 3] = ["config", "data", "force"];
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|r| r.split_once('=')) {
            Some((k, v)) if !OWN.contains(&k) => overrides.push((k.to_string(), v.to_string())),
            _ => kept.push(a),
        }
    }
    (kept, overrides)
}

fn ensure_empty(dir: &Path, force: bool) -> CmdResult {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Failure::new(CONFIG, format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    Ok(())
}

fn cmd_phantom(subjects: usize, frames: usize, size: usize, seed: u64, out: &Path, force: bool) -> CmdResult {
    ensure_empty(out, force)?;
    let seqs = generate_phantom(subjects, frames, size, size, seed).map_err(in_stage(CONFIG))?;
    write_dataset(out, &seqs).map_err(in_stage(DATA))?;
    println!("wrote {} subjects to {}", seqs.len(), out.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: Option<&Path>, force: bool, overrides: &[(String, String)]) -> CmdResult {
    let mut cfg = TrainingConfig::default();
    if let Some(p) = config {
        let text = fs::read_to_string(p).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(in_stage(CONFIG))?;
    }
    if let Some(d) = data {
        cfg.data_dir = Some(d.to_path_buf());
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(in_stage(CONFIG))?;
    }
    cfg.validate().map_err(in_stage(CONFIG))?;
    let dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Failure::new(CONFIG, "no dataset: set data_dir or pass --data"))?;
    let subjects = read_dataset(&dir).map_err(in_stage(DATA))?;
    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    let split = partition_subjects(&ids, cfg.val_subjects, cfg.test_subjects, cfg.labels_fraction, cfg.seed)
        .map_err(in_stage(DATA))?;
    let run_dir = runs_root().join(&cfg.run_id);
    ensure_empty(&run_dir, force)?;
    let out = train(&subjects, &split, &cfg, Some(&run_dir)).map_err(in_stage(DATA))?;
    println!(
        "run {}: {} epochs, best epoch {} (validation loss {:.4}), checkpoint {}",
        cfg.run_id,
        out.history.len(),
        out.manifest.epoch,
        out.state.best_val_loss,
        run_dir.join("best").display()
    );
    Ok(())
}

fn load_bundle(ckpt: &Path) -> Result<NetworkBundle<f32>, Failure> {
    let c = load_checkpoint::<f32>(ckpt, None).map_err(in_stage(CHECKPOINT))?;
    if !c.manifest.ema {
        log::warn!("{} holds raw weights, not the parameter average", ckpt.display());
    }
    Ok(c.bundle)
}

/// Run directory of a checkpoint directory such as `runs/<id>/best`.
fn run_dir_of(ckpt: &Path) -> Option<&Path> {
    ckpt.parent().filter(|p| p.join("split.json").exists() || p.join("config.txt").exists())
}

fn run_id_of(ckpt: &Path) -> String {
    run_dir_of(ckpt)
        .and_then(|p| p.file_name())
        .or_else(|| ckpt.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn default_out(ckpt: &Path) -> PathBuf {
    PathBuf::from("reports").join(run_id_of(ckpt))
}

fn run_data_dir(ckpt: &Path, data: Option<&Path>) -> Result<PathBuf, Failure> {
    if let Some(d) = data {
        return Ok(d.to_path_buf());
    }
    let cfg_path = run_dir_of(ckpt).map(|p| p.join("config.txt"));
    let cfg = cfg_path
        .filter(|p| p.exists())
        .map(|p| fs::read_to_string(&p).map_err(|e| Failure::new(CONFIG, e.to_string())))
        .transpose()?
        .map(|t| TrainingConfig::from_text(&t).map_err(in_stage(CONFIG)))
        .transpose()?;
    cfg.and_then(|c| c.data_dir)
        .ok_or_else(|| Failure::new(CONFIG, "no dataset: pass --data"))
}

fn read_split(path: &Path) -> Result<DatasetSplit, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))
}

fn cmd_eval(
    ckpt: &Path,
    data: Option<&Path>,
    split_name: &str,
    split_file: Option<&Path>,
    compare: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let bundle = load_bundle(ckpt)?;
    let data_dir = run_data_dir(ckpt, data)?;
    let subjects = read_dataset(&data_dir).map_err(in_stage(DATA))?;
    let ids = match split_file.map(Path::to_path_buf).or_else(|| run_dir_of(ckpt).map(|p| p.join("split.json"))) {
        Some(p) if p.exists() => read_split(&p)?.named(split_name).map_err(in_stage(CONFIG))?,
        _ if split_name == "all" => subjects.iter().map(|s| s.subject_id.clone()).collect(),
        _ => return Err(Failure::new(CONFIG, format!("no split file for split {split_name:?}; pass --split-file or -s all"))),
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(ckpt));
    let mut report = evaluate(&bundle.nets, &bundle.params, &subjects, &ids, Some(&out), parallelism(true))
        .map_err(in_stage(DATA))?;
    if let Some(other) = compare {
        let text = fs::read_to_string(other).map_err(|e| Failure::new(DATA, format!("{}: {e}", other.display())))?;
        let base = read_metrics_csv(&text).map_err(in_stage(DATA))?;
        let p = compare_reports(&report, &base);
        for (class, v) in &p {
            println!("wilcoxon {class}: p = {v:.4}");
        }
        report.p_values = Some(p);
        report.write(&out).map_err(in_stage(DATA))?;
    }
    println!(
        "mean dice {:.4} ± {:.4} over {} subjects; LV {:.4} MYO {:.4} RV {:.4}; wrote {}",
        report.mean,
        report.std_subjects,
        report.per_subject.len(),
        report.per_class[0].mean,
        report.per_class[1].mean,
        report.per_class[2].mean,
        out.display()
    );
    Ok(())
}

/// Reads a PNG and normalises it as a single-frame volume.
fn read_input(path: &Path) -> Result<Frame, Failure> {
    let raw = read_frame_png(path).map_err(in_stage(DATA))?;
    let data = normalize_volume(&raw.data).map_err(in_stage(DATA))?;
    Frame::new(raw.height, raw.width, data).map_err(in_stage(DATA))
}

fn ed_frame(ckpt: &Path, image: Option<&Path>, data: Option<&Path>, subject: Option<&str>) -> Result<Frame, Failure> {
    if let Some(p) = image {
        return read_input(p);
    }
    let subjects = read_dataset(&run_data_dir(ckpt, data)?).map_err(in_stage(DATA))?;
    let wanted = match subject {
        Some(s) => Some(s.to_string()),
        None => run_dir_of(ckpt)
            .map(|p| p.join("split.json"))
            .filter(|p| p.exists())
            .map(|p| read_split(&p))
            .transpose()?
            .and_then(|s| s.test_subjects.into_iter().next()),
    };
    let seq = match &wanted {
        Some(id) => subjects.iter().find(|s| &s.subject_id == id),
        None => subjects.first(),
    }
    .ok_or_else(|| Failure::new(DATA, format!("subject {} not found", wanted.unwrap_or_default())))?;
    Ok(seq.frames[seq.ed_index].clone())
}

fn cmd_synthesize(
    ckpt: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    subject: Option<&str>,
    n_frames: usize,
    out: Option<&Path>,
) -> CmdResult {
    let bundle = load_bundle(ckpt)?;
    let ed = ed_frame(ckpt, image, data, subject)?;
    let frames = synthesize_sequence(&bundle.nets, &bundle.params, &ed, n_frames, parallelism(true))
        .map_err(in_stage(CHECKPOINT))?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(ckpt));
    let dir = out.join("synthesis");
    fs::create_dir_all(&dir).map_err(|e| Failure::new(DATA, format!("{}: {e}", dir.display())))?;
    for (k, f) in frames.iter().enumerate() {
        save_frame_png(f, &dir.join(format!("frame_{k:03}.png"))).map_err(in_stage(DATA))?;
    }
    render_sequence(&frames, &out.join("synthesis_strip.png")).map_err(in_stage(DATA))?;
    println!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}

fn cmd_factors(ckpt: &Path, image: &Path, out: Option<&Path>) -> CmdResult {
    let bundle = load_bundle(ckpt)?;
    let frame = read_input(image)?;
    let (s, _) = encode_frame(&bundle.nets, &bundle.params, &frame, parallelism(true)).map_err(in_stage(CHECKPOINT))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(ckpt).join("factors.png"));
    render_factors(&frame, &s, &path).map_err(in_stage(DATA))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Phantom { subjects, frames, size, seed, out, force } => cmd_phantom(subjects, frames, size, seed, &out, force),
        Command::Train { config, data, force, overrides } => cmd_train(config.as_deref(), data.as_deref(), force, &overrides),
        Command::Eval { checkpoint, data, split, split_file, compare, out } => {
            cmd_eval(&checkpoint, data.as_deref(), &split, split_file.as_deref(), compare.as_deref(), out.as_deref())
        }
        Command::Synthesize { checkpoint, image, data, subject, frames, out } => {
            cmd_synthesize(&checkpoint, image.as_deref(), data.as_deref(), subject.as_deref(), frames, out.as_deref())
        }
        Command::Factors { checkpoint, image, out } => cmd_factors(&checkpoint, &image, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let mut cli = Cli::parse_from(args);
    if let Command::Train { overrides: o, .. } = &mut cli.command {
        *o = overrides;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
