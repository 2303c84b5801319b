//! Command-line driver: dataset generation, training, inference, evaluation,
//! receptive-field analysis, and the ablation grid.
//!
//! Every run writes a `run.json` with the fully resolved configuration into
//! its output directory. Options can come from a flat `key=value` config
//! file (`--config`); explicit flags win over the file, the file wins over
//! built-in defaults. `CYCLEVOS_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cyclevos_core::erf::{compute_cycle_erf, export_erf, partitioned_reconstruct, ErfConfig};
use cyclevos_core::infer::{
    propagate, CorrectionConfig, Degradation, InferConfig, Strategy,
};
use cyclevos_core::metrics::{build_report, score_sequence, SequenceScore};
use cyclevos_core::model::{load_checkpoint, ModelConfig};
use cyclevos_core::seqio::{load_sequence, save_predictions, SuiteManifest, VideoSequence};
use cyclevos_core::synth::{generate_suite, SynthSpec};
use cyclevos_core::trainer::{train_to_dir, CyclicMode, TrainConfig};
use cyclevos_core::Weights;

#[derive(Parser)]
#[command(name = "cyclevos", version, about = "cyclic-consistency video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes benchmark suite.
    Synth(SynthArgs),
    /// Train a model on the suite's train split.
    Train(TrainArgs),
    /// Propagate first-frame masks through the eval split.
    Infer(InferArgs),
    /// Score saved predictions against ground truth.
    Eval(EvalArgs),
    /// Compute and export cycle receptive-field maps.
    Erf(ErfArgs),
    /// Paired-seed ablation grid over training and inference variants.
    Ablate(AblateArgs),
}

/// Flat `key=value` config file; blank lines and `#` comments allowed.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key=value", path.display(), ln + 1))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    /// flag > file > default
    fn get<T: FromStr + Copy>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(s) => s
                .parse()
                .map_err(|e| anyhow::anyhow!("config key {key}={s}: {e}")),
            None => Ok(default),
        }
    }

    fn get_flag(&self, key: &str, flag: bool, default: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.get(key, None, default)
    }
}

fn write_run_json<T: serde::Serialize>(out: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let s = serde_json::to_string_pretty(resolved)?;
    std::fs::write(out.join("run.json"), s)?;
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    eval: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let f = FileConfig::load(a.config.as_ref())?;
    let spec = SynthSpec {
        height: f.get("height", a.height, 64)?,
        width: f.get("width", a.width, 64)?,
        length: f.get("length", a.length, 16)?,
        num_distractors: f.get("distractors", a.distractors, 1)?,
        seed: f.get("seed", a.seed, 0)?,
        ..SynthSpec::default()
    };
    let num_train = f.get("train", a.train, 20)?;
    let num_eval = f.get("eval", a.eval, 5)?;
    let manifest = generate_suite(&a.out, &spec, num_train, num_eval)?;
    write_run_json(
        &a.out,
        &serde_json::json!({ "command": "synth", "spec": spec, "train": num_train, "eval": num_eval }),
    )?;
    println!(
        "wrote {} train + {} eval sequences to {}",
        num_train,
        num_eval,
        a.out.display()
    );
    let _ = manifest;
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<VideoSequence>> {
    let manifest = SuiteManifest::load(data)
        .with_context(|| format!("loading suite manifest from {}", data.display()))?;
    let mut seqs = Vec::new();
    for entry in manifest.split(split) {
        seqs.push(load_sequence(data, &entry.name)?);
    }
    if seqs.is_empty() {
        bail!("no sequences in split {split:?} under {}", data.display());
    }
    Ok(seqs)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// simple or full-history
    #[arg(long)]
    cycle_mode: Option<String>,
    /// Train without the cyclic reconstruction term.
    #[arg(long)]
    no_cyclic: bool,
    #[arg(long)]
    detach_cycle: bool,
    #[arg(long)]
    feat_channels: Option<usize>,
    #[arg(long)]
    key_channels: Option<usize>,
    #[arg(long)]
    value_channels: Option<usize>,
}

fn parse_cycle_mode(s: &str) -> Result<CyclicMode> {
    match s {
        "simple" => Ok(CyclicMode::Simple),
        "full-history" => Ok(CyclicMode::FullHistory),
        other => bail!("unknown cycle mode {other:?} (expected simple or full-history)"),
    }
}

fn resolve_train(a: &TrainArgs, f: &FileConfig) -> Result<(TrainConfig, ModelConfig)> {
    let mode_str = match &a.cycle_mode {
        Some(s) => s.clone(),
        None => f
            .0
            .get("cycle-mode")
            .cloned()
            .unwrap_or_else(|| "simple".into()),
    };
    let train = TrainConfig {
        epochs: f.get("epochs", a.epochs, 20)?,
        batch_size: f.get("batch", a.batch, 2)?,
        learning_rate: f.get("lr", a.lr, 1e-3)?,
        gamma: f.get("gamma", a.gamma, 1.0)?,
        seed: f.get("seed", a.seed, 0)?,
        steps_per_epoch: f.get("steps-per-epoch", a.steps_per_epoch, 0)?,
        cyclic: !f.get_flag("no-cyclic", a.no_cyclic, false)?,
        cyclic_mode: parse_cycle_mode(&mode_str)?,
        detach_cycle: f.get_flag("detach-cycle", a.detach_cycle, false)?,
        ..TrainConfig::default()
    };
    Ok((train, ModelConfig::default())) // height/width fixed up from the manifest
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let f = FileConfig::load(a.config.as_ref())?;
    let (train, _) = resolve_train(&a, &f)?;
    let manifest = SuiteManifest::load(&a.data)?;
    let model = ModelConfig {
        height: manifest.height,
        width: manifest.width,
        feat_channels: f.get("feat-channels", a.feat_channels, 16)?,
        key_channels: f.get("key-channels", a.key_channels, 8)?,
        value_channels: f.get("value-channels", a.value_channels, 16)?,
    };
    write_run_json(
        &a.out,
        &serde_json::json!({ "command": "train", "train": train, "model": model }),
    )?;
    let seqs = load_split(&a.data, "train")?;
    let started = Instant::now();
    let outcome = train_to_dir(&model, &train, &seqs, &a.out)?;
    let last = outcome.log.last().unwrap();
    println!(
        "trained {} epochs in {:.1}s; final loss {:.4} (forward {:.4}, cycle {:.4})",
        train.epochs,
        started.elapsed().as_secs_f64(),
        last.total,
        last.forward,
        last.cycle
    );
    println!("checkpoint: {}", a.out.join("model.cvos").display());
    Ok(())
}

fn parse_strategy(name: &str, mem_period: usize) -> Result<Strategy> {
    match name {
        "first" => Ok(Strategy::First),
        "prev" => Ok(Strategy::Prev),
        "first-prev" => Ok(Strategy::FirstPrev),
        "mem" => Ok(Strategy::Mem { period: mem_period }),
        other => bail!("unknown strategy {other:?} (expected first, prev, first-prev, mem)"),
    }
}

fn parse_degradation(name: &str) -> Result<Degradation> {
    match name {
        "none" => Ok(Degradation::None),
        "bbox" => Ok(Degradation::BoundingBox),
        other => bail!("unknown degradation {other:?} (expected none or bbox)"),
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// first | prev | first-prev | mem
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    mem_period: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Correction iterations per corrected frame.
    #[arg(long)]
    iters_n: Option<usize>,
    /// Correct every k-th propagated frame.
    #[arg(long)]
    period_k: Option<usize>,
    #[arg(long)]
    no_correction: bool,
    /// none | bbox (replaces masks stored to memory under the mem strategy)
    #[arg(long)]
    degrade: Option<String>,
    /// Skip the correction-free timing baseline.
    #[arg(long)]
    no_timing_baseline: bool,
}

struct InferRun {
    report: cyclevos_core::metrics::EvalReport,
    seconds: f64,
    frames: usize,
}

fn run_inference(
    model: &ModelConfig,
    weights: &Weights<f32>,
    seqs: &[VideoSequence],
    icfg: &InferConfig,
    save_to: Option<&Path>,
) -> Result<InferRun> {
    let mut scored = Vec::new();
    let mut seconds = 0.0;
    let mut frames = 0usize;
    for seq in seqs {
        let result = propagate(model, weights, seq, seq.first_mask(), icfg);
        seconds += result.seconds;
        frames += seq.len() - 1;
        if let Some(dir) = save_to {
            save_predictions(dir, &seq.name, &result.masks)?;
        }
        scored.push((
            seq.name.clone(),
            score_sequence(&seq.masks, &result.masks, seq.objects),
        ));
    }
    Ok(InferRun {
        report: build_report(scored, frames, seconds),
        seconds,
        frames,
    })
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let f = FileConfig::load(a.config.as_ref())?;
    let (model, weights) = load_checkpoint(&a.checkpoint)?;
    let strategy_name = match &a.strategy {
        Some(s) => s.clone(),
        None => f
            .0
            .get("strategy")
            .cloned()
            .unwrap_or_else(|| "first-prev".into()),
    };
    let degrade_name = match &a.degrade {
        Some(s) => s.clone(),
        None => f.0.get("degrade").cloned().unwrap_or_else(|| "none".into()),
    };
    let split = match &a.split {
        Some(s) => s.clone(),
        None => f.0.get("split").cloned().unwrap_or_else(|| "eval".into()),
    };
    let icfg = InferConfig {
        strategy: parse_strategy(&strategy_name, f.get("mem-period", a.mem_period, 5)?)?,
        correction: CorrectionConfig {
            enabled: !f.get_flag("no-correction", a.no_correction, false)?,
            alpha: f.get("alpha", a.alpha, 0.5)?,
            iterations: f.get("iters-n", a.iters_n, 10)?,
            period: f.get("period-k", a.period_k, 5)?,
            clamp: true,
        },
        memory_degradation: parse_degradation(&degrade_name)?,
    };
    write_run_json(
        &a.out,
        &serde_json::json!({
            "command": "infer", "model": model, "infer": icfg, "split": split,
        }),
    )?;

    let seqs = load_split(&a.data, &split)?;
    let run = run_inference(&model, &weights, &seqs, &icfg, Some(&a.out))?;
    std::fs::write(a.out.join("report.csv"), run.report.to_csv())?;
    std::fs::write(a.out.join("report.json"), run.report.to_json())?;

    let mut timing = serde_json::json!({
        "frames": run.frames,
        "seconds": run.seconds,
        "fps": run.report.fps,
    });
    if icfg.correction.enabled && !a.no_timing_baseline {
        let plain = InferConfig {
            correction: CorrectionConfig {
                enabled: false,
                ..icfg.correction
            },
            ..icfg
        };
        let base = run_inference(&model, &weights, &seqs, &plain, None)?;
        timing["fps_without_correction"] = serde_json::json!(base.report.fps);
        timing["seconds_without_correction"] = serde_json::json!(base.seconds);
    }
    std::fs::write(a.out.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    println!(
        "J {:.4}  F {:.4}  J&F {:.4}  ({:.2} fps over {} frames)",
        run.report.j_mean, run.report.f_mean, run.report.jf_mean, run.report.fps, run.frames
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of saved predictions (indexed PNGs per sequence).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split: Option<String>,
}

fn load_prediction_masks(dir: &Path, seq: &VideoSequence) -> Result<Vec<cyclevos_core::Mask<f32>>> {
    let mut masks = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let path = dir.join(&seq.name).join(format!("{:05}.png", t + 1));
        let (h, w, labels) = cyclevos_core::seqio::load_label_png(&path)
            .with_context(|| format!("loading prediction {}", path.display()))?;
        if (h, w) != (seq.height(), seq.width()) {
            bail!("{}: prediction size mismatch", path.display());
        }
        masks.push(cyclevos_core::Mask::from_label_map(
            &labels,
            seq.height(),
            seq.width(),
            seq.objects,
        ));
    }
    Ok(masks)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split = a.split.clone().unwrap_or_else(|| "eval".into());
    let seqs = load_split(&a.data, &split)?;
    let mut scored = Vec::new();
    let mut frames = 0usize;
    for seq in &seqs {
        let preds = load_prediction_masks(&a.pred, seq)?;
        frames += seq.len() - 1;
        scored.push((
            seq.name.clone(),
            score_sequence(&seq.masks, &preds, seq.objects),
        ));
    }
    let report = build_report(scored, frames, 0.0);
    write_run_json(
        &a.out,
        &serde_json::json!({ "command": "eval", "split": split, "pred": a.pred }),
    )?;
    std::fs::write(a.out.join("report.csv"), report.to_csv())?;
    std::fs::write(a.out.join("report.json"), report.to_json())?;
    println!(
        "J {:.4}  F {:.4}  J&F {:.4}",
        report.j_mean, report.f_mean, report.jf_mean
    );
    Ok(())
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seq: String,
    /// Reference frame index (0-based).
    #[arg(long, default_value_t = 0)]
    frame_l: usize,
    /// Target frame index (0-based); defaults to the last frame.
    #[arg(long)]
    frame_t: Option<usize>,
    #[arg(long)]
    erf_m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

fn cmd_erf(a: ErfArgs) -> Result<()> {
    let (model, weights) = load_checkpoint(&a.checkpoint)?;
    let seq = load_sequence(&a.data, &a.seq)?;
    let t = a.frame_t.unwrap_or(seq.len() - 1);
    if a.frame_l >= seq.len() || t >= seq.len() || a.frame_l == t {
        bail!(
            "bad frame indices l={} t={} for a {}-frame sequence",
            a.frame_l,
            t,
            seq.len()
        );
    }
    let gt_t = seq.masks[t]
        .as_ref()
        .with_context(|| format!("sequence {:?} has no mask at frame {t}", a.seq))?;
    let gt_l = seq.masks[a.frame_l]
        .as_ref()
        .with_context(|| format!("sequence {:?} has no mask at frame {}", a.seq, a.frame_l))?;
    let ecfg = ErfConfig {
        iterations: a.erf_m.unwrap_or(50),
        alpha: a.alpha.unwrap_or(0.5),
    };
    write_run_json(
        &a.out,
        &serde_json::json!({
            "command": "erf", "seq": a.seq, "frame_l": a.frame_l, "frame_t": t,
            "iterations": ecfg.iterations, "alpha": ecfg.alpha,
        }),
    )?;
    let erf = compute_cycle_erf(&model, &weights, &seq.frames[a.frame_l], &seq.frames[t], gt_t, &ecfg);
    export_erf(&a.out, "erf", &erf)?;
    let ((inside, rec_in), (outside, rec_ex)) =
        partitioned_reconstruct(&model, &weights, &seq.frames[a.frame_l], &seq.frames[0], gt_l, &erf);
    export_erf(&a.out, "erf-interior", &inside)?;
    export_erf(&a.out, "erf-exterior", &outside)?;
    save_predictions(&a.out, "reconstruct-interior", &[rec_in])?;
    save_predictions(&a.out, "reconstruct-exterior", &[rec_ex])?;
    println!("wrote receptive-field maps to {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    steps_per_epoch: usize,
    /// Paired seeds, comma separated.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value = "first-prev")]
    strategy: String,
    #[arg(long, default_value_t = 5)]
    mem_period: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "none")]
    degrade: String,
    #[arg(long)]
    feat_channels: Option<usize>,
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow::anyhow!("bad seed {s:?}: {e}")))
        .collect::<Result<_>>()?;
    let manifest = SuiteManifest::load(&a.data)?;
    let model = ModelConfig {
        height: manifest.height,
        width: manifest.width,
        feat_channels: a.feat_channels.unwrap_or(8),
        key_channels: 4,
        value_channels: 8,
    };
    let strategy = parse_strategy(&a.strategy, a.mem_period)?;
    let degrade = parse_degradation(&a.degrade)?;
    let train_seqs = load_split(&a.data, "train")?;
    let eval_seqs = load_split(&a.data, "eval")?;

    write_run_json(
        &a.out,
        &serde_json::json!({
            "command": "ablate", "epochs": a.epochs, "seeds": seeds,
            "strategy": a.strategy, "alpha": a.alpha, "degrade": a.degrade,
            "model": model,
        }),
    )?;

    // condition = training variant x inference correction
    let conditions = [
        ("baseline", false, false),
        ("+cyclic", true, false),
        ("+correction", false, true),
        ("+both", true, true),
    ];
    let mut rows: Vec<(String, Vec<SequenceScore>)> = Vec::new();
    for (name, cyclic, correct) in conditions {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let tcfg = TrainConfig {
                epochs: a.epochs,
                steps_per_epoch: a.steps_per_epoch,
                cyclic,
                seed,
                ..TrainConfig::default()
            };
            let outcome = cyclevos_core::trainer::run_training(&model, &tcfg, &train_seqs)?;
            let icfg = InferConfig {
                strategy,
                correction: CorrectionConfig {
                    enabled: correct,
                    alpha: a.alpha,
                    ..CorrectionConfig::default()
                },
                memory_degradation: degrade,
            };
            let run = run_inference(&model, &outcome.weights, &eval_seqs, &icfg, None)?;
            per_seed.push(SequenceScore {
                j: run.report.j_mean,
                f: run.report.f_mean,
            });
            println!(
                "{name} seed {seed}: J {:.4} F {:.4}",
                run.report.j_mean, run.report.f_mean
            );
        }
        rows.push((name.to_string(), per_seed));
    }

    let mut csv = String::from("condition,seed,J,F,J&F\n");
    let mut md = String::from("| condition | mean J | mean F | mean J&F |\n|---|---|---|---|\n");
    for (name, scores) in &rows {
        for (seed, s) in seeds.iter().zip(scores) {
            csv.push_str(&format!(
                "{name},{seed},{:.6},{:.6},{:.6}\n",
                s.j,
                s.f,
                (s.j + s.f) / 2.0
            ));
        }
        let n = scores.len() as f64;
        let mj = scores.iter().map(|s| s.j).sum::<f64>() / n;
        let mf = scores.iter().map(|s| s.f).sum::<f64>() / n;
        md.push_str(&format!(
            "| {name} | {mj:.4} | {mf:.4} | {:.4} |\n",
            (mj + mf) / 2.0
        ));
    }
    std::fs::write(a.out.join("ablation.csv"), csv)?;
    std::fs::write(a.out.join("ablation.md"), &md)?;
    println!("{md}");
    Ok(())
}

fn run() -> Result<()> {
    if let Ok(v) = std::env::var("CYCLEVOS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("CYCLEVOS_THREADS={v:?} is not a thread count"))?;
        cyclevos_core::par::limit_threads(n.max(1));
    }
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Erf(a) => cmd_erf(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
