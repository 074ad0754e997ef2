//! `finch`: one executable for the full pipeline — synthetic data generation,
//! three-stage training, evaluation, fixed-vs-adaptive weight sweeps,
//! single-sample fusion inspection, dependence diagnostics, and gradient
//! checking.
//!
//! Every subcommand writes a manifest (`<primary output>.manifest.json`)
//! recording the resolved configuration and seed, so any run can be
//! reproduced from its artifacts alone. Tables printed to stdout are also
//! emitted as line-delimited JSON files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use finch_core::dist::normalize_log_scores;
use finch_core::features::build_gating_features;
use finch_core::gate::{gate_forward, GateMode, GateParameters};
use finch_core::pipeline::{evaluate_checkpoint, sweep_omega};
use finch_core::store::{
    read_checkpoint, read_dataset, read_prior_table, write_checkpoint, write_dataset,
    write_prior_table,
};
use finch_core::synthetic::{corrupt_priors, generate, to_dataset, to_prior_table, Preset};
use finch_core::training::{
    context_prior_table, gate_from_flat, gate_to_flat, prepare_fused_samples, stage2_batch_grads,
    stage2_batch_loss, stage3_batch_grads_eval, stage3_batch_loss, train_context_mlp,
    train_stage1, train_stage2, train_stage3, write_epoch_logs, AudioHead, GateConfig,
    StageCheckpoint, TrainConfig,
};
use finch_core::{CategoricalDistribution, Dataset, FusionInputs, LogScoreVector, PriorTable};

#[derive(Parser)]
#[command(name = "finch", version, about = "Adaptive audio/context fusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its context prior table.
    Synth(SynthArgs),
    /// Train one stage (1: audio head, 2: scalar weight, 3: adaptive gate).
    Train(TrainArgs),
    /// Evaluate a checkpoint: top-1, class-mean AP, macro AUROC, log-loss.
    Eval(EvalArgs),
    /// Compare fixed fusion weights against the adaptive gate.
    SweepOmega(SweepArgs),
    /// Fuse a single sample and print audio / prior / fused top-k plus omega.
    Fuse(FuseArgs),
    /// Probe whether embeddings predict the context prior within classes.
    Diagnose(DiagnoseArgs),
    /// Check analytic stage-2/3 gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Seed precedence: `--seed` flag, then `FINCH_SEED`, then 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("FINCH_SEED") {
        Ok(v) => v
            .parse()
            .with_context(|| format!("FINCH_SEED='{v}' is not a valid u64")),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    seed: u64,
    config: C,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn write_manifest<C: Serialize>(primary_output: &Path, manifest: &Manifest<C>) -> Result<()> {
    let mut path = primary_output.as_os_str().to_owned();
    path.push(".manifest.json");
    let mut body = serde_json::to_string_pretty(manifest)?;
    body.push('\n');
    std::fs::write(PathBuf::from(path), body)?;
    Ok(())
}

fn paths(v: &[&Path]) -> Vec<String> {
    v.iter().map(|p| p.display().to_string()).collect()
}

fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

fn top_k(dist: &CategoricalDistribution, k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..dist.n_classes()).collect();
    idx.sort_by(|&a, &b| dist.probs()[b].partial_cmp(&dist.probs()[a]).unwrap());
    idx.truncate(k);
    idx.into_iter().map(|i| (i, dist.probs()[i])).collect()
}

fn parse_probs(csv: &str) -> Result<CategoricalDistribution> {
    let vals: Vec<f64> = csv
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad probability '{t}'")))
        .collect::<Result<_>>()?;
    Ok(CategoricalDistribution::new(vals)?)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Preset: ci | dependent | heterogeneous.
    #[arg(long)]
    preset: String,
    /// Number of samples.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Override the preset's class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Override the preset's embedding dimension.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Override the preset's context cell count.
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dataset: PathBuf,
    #[arg(long)]
    out_priors: PathBuf,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let mut config = Preset::parse(&args.preset)?.config(args.n, seed);
    if let Some(c) = args.classes {
        config.n_classes = c;
    }
    if let Some(d) = args.embed_dim {
        config.embed_dim = d;
    }
    if let Some(g) = args.cells {
        config.n_cells = g;
    }
    config.validate()?;

    let mut samples = generate(&config)?;
    corrupt_priors(&mut samples, &config)?;
    let dataset = to_dataset(&samples, config.n_classes)?;
    let priors = to_prior_table(&samples)?;
    write_dataset(&dataset, &args.out_dataset)?;
    write_prior_table(&priors, &args.out_priors)?;

    write_manifest(
        &args.out_dataset,
        &Manifest {
            command: "synth",
            seed,
            config: &config,
            inputs: vec![],
            outputs: paths(&[&args.out_dataset, &args.out_priors]),
        },
    )?;
    println!(
        "wrote {} samples ({} classes, {} dims, {} cells) to {} / {}",
        dataset.len(),
        config.n_classes,
        config.embed_dim,
        config.n_cells,
        args.out_dataset.display(),
        args.out_priors.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct TrainHyper {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 96)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.10)]
    warmup_fraction: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda_var: f64,
    #[arg(long, default_value_t = 0.10)]
    val_fraction: f64,
}

impl TrainHyper {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            lambda_var: self.lambda_var,
            seed,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: 1, 2 or 3.
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    dataset: PathBuf,
    /// Context prior table (stages 2 and 3 unless --context-mlp).
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Checkpoint of the previous stage (stages 2 and 3).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train a metadata-only prior network instead of loading a prior table.
    #[arg(long)]
    context_mlp: bool,
    /// Where to write the prior table produced by --context-mlp.
    #[arg(long)]
    out_priors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    gate_hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[command(flatten)]
    hyper: TrainHyper,
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    stage: u8,
    train: &'a TrainConfig,
    gate_hidden: usize,
    dropout: f64,
    context_mlp: bool,
}

fn load_priors_for_training(args: &TrainArgs, dataset: &Dataset, config: &TrainConfig) -> Result<PriorTable> {
    if args.context_mlp {
        let (mlp, logs) = train_context_mlp(dataset, config)?;
        let table = context_prior_table(&mlp, dataset)?;
        if let Some(out) = &args.out_priors {
            write_prior_table(&table, out)?;
            let mut log_path = out.as_os_str().to_owned();
            log_path.push(".epochs.jsonl");
            write_epoch_logs(&logs, &PathBuf::from(log_path))?;
        }
        Ok(table)
    } else {
        let path = args.priors.as_ref().context(
            "stages 2 and 3 need --priors (or --context-mlp to train the prior network)",
        )?;
        Ok(read_prior_table(path)?)
    }
}

fn load_init(args: &TrainArgs, want_stage: u8) -> Result<StageCheckpoint> {
    let path = args.init.as_ref().with_context(|| {
        format!(
            "stage {} requires --init with the stage-{} checkpoint",
            args.stage, want_stage
        )
    })?;
    let ckpt = read_checkpoint(path)?;
    if ckpt.stage != want_stage {
        bail!(
            "--init {} holds a stage-{} checkpoint; stage {} needs stage {}",
            path.display(),
            ckpt.stage,
            args.stage,
            want_stage
        );
    }
    Ok(ckpt)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let config = args.hyper.to_config(seed);
    let dataset = read_dataset(&args.dataset)?;

    let (ckpt, logs) = match args.stage {
        1 => train_stage1(&dataset, &config)?,
        2 => {
            let priors = load_priors_for_training(&args, &dataset, &config)?;
            let init = load_init(&args, 1)?;
            train_stage2(&dataset, &priors, &init, &config)?
        }
        3 => {
            let priors = load_priors_for_training(&args, &dataset, &config)?;
            let init = load_init(&args, 2)?;
            let gate_config = GateConfig {
                hidden: args.gate_hidden,
                dropout_rate: args.dropout,
            };
            train_stage3(&dataset, &priors, &init, &config, &gate_config)?
        }
        other => bail!("--stage must be 1, 2 or 3 (got {other})"),
    };

    write_checkpoint(&ckpt, &args.out)?;
    let mut log_path = args.out.as_os_str().to_owned();
    log_path.push(".epochs.jsonl");
    write_epoch_logs(&logs, &PathBuf::from(log_path))?;

    let mut inputs = vec![args.dataset.display().to_string()];
    if let Some(p) = &args.priors {
        inputs.push(p.display().to_string());
    }
    if let Some(p) = &args.init {
        inputs.push(p.display().to_string());
    }
    write_manifest(
        &args.out,
        &Manifest {
            command: "train",
            seed,
            config: TrainManifestConfig {
                stage: args.stage,
                train: &config,
                gate_hidden: args.gate_hidden,
                dropout: args.dropout,
                context_mlp: args.context_mlp,
            },
            inputs,
            outputs: paths(&[&args.out]),
        },
    )?;
    if ckpt.split_warning {
        eprintln!("warning: stratified validation split fell back to a random split");
    }
    println!(
        "stage {} done: best val accuracy {:.4}, checkpoint at {}",
        ckpt.stage,
        ckpt.best_val_accuracy,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Evaluate the omega = 0 fallback of the same checkpoint.
    #[arg(long)]
    audio_only: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let priors = args.priors.as_ref().map(|p| read_prior_table(p)).transpose()?;
    let report = evaluate_checkpoint(&ckpt, &dataset, priors.as_ref(), args.audio_only)?;

    println!(
        "top1 {:.4}  cmAP {:.4}  AUROC {:.4}  log-loss {:.4}  (n = {})",
        report.top1, report.cmap, report.auroc, report.mean_log_loss, report.n_samples
    );
    println!("{}", report.to_json_line());
    write_json_pretty(&report, &args.out)?;

    let mut inputs = paths(&[&args.checkpoint, &args.dataset]);
    if let Some(p) = &args.priors {
        inputs.push(p.display().to_string());
    }
    write_manifest(
        &args.out,
        &Manifest {
            command: "eval",
            seed: ckpt.seed,
            config: serde_json::json!({ "audio_only": args.audio_only }),
            inputs,
            outputs: paths(&[&args.out]),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-omega
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    priors: PathBuf,
    /// Comma-separated fixed fusion weights.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.8,1.6,2.0")]
    omega_grid: Vec<f64>,
    /// Line-delimited JSON rows.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let priors = read_prior_table(&args.priors)?;
    let rows = sweep_omega(&ckpt, &dataset, &priors, &args.omega_grid)?;

    println!("{:>10}  {:>8}  {:>8}", "omega", "acc", "mAP");
    let mut jsonl = String::new();
    for row in &rows {
        match row.omega {
            Some(w) => println!("{:>10.3}  {:>8.4}  {:>8.4}", w, row.accuracy, row.map),
            None => println!("{:>10}  {:>8.4}  {:>8.4}", "adaptive", row.accuracy, row.map),
        }
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    std::fs::write(&args.out, jsonl)?;

    write_manifest(
        &args.out,
        &Manifest {
            command: "sweep-omega",
            seed: ckpt.seed,
            config: serde_json::json!({ "omega_grid": &args.omega_grid }),
            inputs: paths(&[&args.checkpoint, &args.dataset, &args.priors]),
            outputs: paths(&[&args.out]),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fuse
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the sample from a dataset file (with --priors and --index) ...
    #[arg(long, requires = "priors", requires = "index")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Row index into --dataset.
    #[arg(long)]
    index: Option<usize>,
    /// ... or give the sample inline: comma-separated audio posterior,
    #[arg(long, conflicts_with = "dataset")]
    audio: Option<String>,
    /// comma-separated context prior,
    #[arg(long, conflicts_with = "dataset")]
    prior: Option<String>,
    /// and the spatiotemporal metadata.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lat: f32,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lon: f32,
    #[arg(long, default_value_t = 0.0)]
    day: f32,
    #[arg(long, default_value_t = 12.0)]
    hour: f32,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FuseRecord {
    omega: f64,
    temperature: f64,
    epsilon: f64,
    audio_top_k: Vec<(usize, f64)>,
    prior_top_k: Vec<(usize, f64)>,
    fused_top_k: Vec<(usize, f64)>,
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let (audio, prior, ctx) = match (&args.dataset, &args.audio, &args.prior) {
        (Some(ds_path), None, None) => {
            let dataset = read_dataset(ds_path)?;
            let priors = read_prior_table(args.priors.as_ref().unwrap())?;
            let idx = args.index.unwrap();
            let rec = dataset
                .records
                .get(idx)
                .with_context(|| format!("index {idx} out of range (n = {})", dataset.len()))?;
            let audio = normalize_log_scores(&LogScoreVector::new(
                ckpt.head.log_posterior(&rec.embedding),
            )?)?;
            (audio, priors.lookup(rec.sample_id)?, rec.context)
        }
        (None, Some(a), Some(p)) => {
            let ctx = finch_core::SpatioTemporalContext::new(args.lat, args.lon, args.day, args.hour)?;
            (parse_probs(a)?, parse_probs(p)?, ctx)
        }
        _ => bail!("give either --dataset/--priors/--index or --audio/--prior"),
    };

    let omega = match (&ckpt.gate, ckpt.scalar_omega()) {
        (Some(gate), _) => {
            let u = build_gating_features(&audio, &prior, &ctx)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            gate_forward(gate, &u, GateMode::Eval, &mut rng)?.0
        }
        (None, Some(w)) => w,
        (None, None) => 0.0,
    };
    let (temperature, epsilon) = match &ckpt.gate {
        Some(g) => (g.temperature(), g.epsilon()),
        None => (ckpt.temperature(), ckpt.epsilon()),
    };
    let fused = finch_core::fuse(&FusionInputs {
        audio_log_probs: LogScoreVector::new(audio.probs().iter().map(|p| p.ln()).collect())?,
        prior: prior.clone(),
        omega,
        temperature,
        epsilon,
    })?;

    let record = FuseRecord {
        omega,
        temperature,
        epsilon,
        audio_top_k: top_k(&audio, args.top_k),
        prior_top_k: top_k(&prior, args.top_k),
        fused_top_k: top_k(&fused, args.top_k),
    };
    println!("omega {:.4}  T {:.4}  eps {:.2e}", omega, temperature, epsilon);
    for (name, list) in [
        ("audio", &record.audio_top_k),
        ("prior", &record.prior_top_k),
        ("fused", &record.fused_top_k),
    ] {
        let cells: Vec<String> = list.iter().map(|(i, p)| format!("{i}:{p:.4}")).collect();
        println!("{name:>5}  {}", cells.join("  "));
    }
    write_json_pretty(&record, &args.out)?;

    let inputs = match &args.dataset {
        Some(ds) => paths(&[&args.checkpoint, ds, args.priors.as_ref().unwrap()]),
        None => paths(&[&args.checkpoint]),
    };
    write_manifest(
        &args.out,
        &Manifest {
            command: "fuse",
            seed: ckpt.seed,
            config: serde_json::json!({ "top_k": args.top_k, "index": args.index }),
            inputs,
            outputs: paths(&[&args.out]),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    priors: PathBuf,
    #[arg(long, default_value_t = 50)]
    min_samples: usize,
    #[arg(long, default_value_t = 199)]
    n_perm: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let dataset = read_dataset(&args.dataset)?;
    let priors = read_prior_table(&args.priors)?;
    let report =
        finch_core::diagnostics::dependence_report(&dataset, &priors, args.min_samples, args.n_perm, seed)?;

    println!(
        "mean R^2 {:.4}  Cohen's d {:.3}  permutation p {:.4}  ({} classes tested)",
        report.mean_r2, report.cohens_d, report.permutation_p, report.n_classes_tested
    );
    println!(
        "frac positive improvement {:.3}  frac R^2 > 0.05 {:.3}",
        report.frac_positive_improvement, report.frac_r2_above_005
    );
    write_json_pretty(&report, &args.out)?;

    write_manifest(
        &args.out,
        &Manifest {
            command: "diagnose",
            seed,
            config: serde_json::json!({ "min_samples": args.min_samples, "n_perm": args.n_perm }),
            inputs: paths(&[&args.dataset, &args.priors]),
            outputs: paths(&[&args.out]),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    gate_hidden: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct GroupResult {
    group: String,
    max_rel_err: f64,
    pass: bool,
}

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(GRADCHECK_FLOOR)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let config = Preset::parse("ci")?.config(args.batch.max(16), seed);
    let samples = generate(&config)?;
    let dataset = to_dataset(&samples, config.n_classes)?;
    let priors = to_prior_table(&samples)?;

    // A random (untrained) head exercises the same gradient paths as a
    // trained one without paying for training.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let head = AudioHead {
        weights: (0..config.n_classes * config.embed_dim)
            .map(|_| 0.3 * rng.gen_range(-1.0..1.0))
            .collect(),
        bias: vec![0.0; config.n_classes],
        n_classes: config.n_classes,
        embed_dim: config.embed_dim,
    };
    let fused = prepare_fused_samples(&head, &dataset, &priors)?;
    let batch: Vec<_> = fused.iter().take(args.batch).collect();

    let mut results = Vec::new();

    // stage 2: the three reparameterized scalars
    let raws = [0.3, -0.2, 0.1];
    let (_, analytic2) = stage2_batch_grads(&batch, raws)?;
    let h = 1e-6;
    for (i, name) in ["omega_raw", "temp_raw", "eps_raw"].iter().enumerate() {
        let mut plus = raws;
        plus[i] += h;
        let mut minus = raws;
        minus[i] -= h;
        let fd = (stage2_batch_loss(&batch, plus)? - stage2_batch_loss(&batch, minus)?) / (2.0 * h);
        let err = rel_err(analytic2[i], fd);
        results.push(GroupResult {
            group: format!("stage2.{name}"),
            max_rel_err: err,
            pass: err < GRADCHECK_TOL,
        });
    }

    // stage 3: the full gate, grouped by parameter block. The seeded init
    // keeps w2 at zero, which would zero the w1/b1 gradients and make their
    // check vacuous, so perturb every block first.
    let mut gate = GateParameters::seeded(args.gate_hidden, 0.1, seed.wrapping_add(31))?;
    for w in gate.w2.iter_mut().chain(gate.w1.iter_mut()).chain(gate.b1.iter_mut()) {
        *w += 0.3 * rng.gen_range(-1.0..1.0);
    }
    gate.b2 = 0.1;
    gate.omega_max_raw = 0.2;
    gate.temp_raw = -0.1;
    gate.eps_raw = 0.05;
    let lambda = 1e-3;
    let (_, analytic3) = stage3_batch_grads_eval(&batch, &gate, lambda)?;
    let flat = gate_to_flat(&gate);
    let hd = args.gate_hidden;
    let in_dim = finch_core::GATE_INPUT_DIM;
    let blocks: Vec<(&str, std::ops::Range<usize>)> = vec![
        ("w1", 0..hd * in_dim),
        ("b1", hd * in_dim..hd * in_dim + hd),
        ("w2", hd * in_dim + hd..hd * in_dim + 2 * hd),
        ("b2", hd * in_dim + 2 * hd..hd * in_dim + 2 * hd + 1),
        ("omega_max_raw", hd * in_dim + 2 * hd + 1..hd * in_dim + 2 * hd + 2),
        ("temp_raw", hd * in_dim + 2 * hd + 2..hd * in_dim + 2 * hd + 3),
        ("eps_raw", hd * in_dim + 2 * hd + 3..hd * in_dim + 2 * hd + 4),
    ];
    for (name, range) in blocks {
        let mut worst = 0.0f64;
        for i in range {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = stage3_batch_loss(&batch, &gate_from_flat(&gate, &plus)?, lambda)?;
            let lm = stage3_batch_loss(&batch, &gate_from_flat(&gate, &minus)?, lambda)?;
            worst = worst.max(rel_err(analytic3[i], (lp - lm) / (2.0 * h)));
        }
        results.push(GroupResult {
            group: format!("stage3.{name}"),
            max_rel_err: worst,
            pass: worst < GRADCHECK_TOL,
        });
    }

    let mut all_pass = true;
    for r in &results {
        println!(
            "{:<22} max rel err {:.3e}  {}",
            r.group,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    write_json_pretty(&results, &args.out)?;
    write_manifest(
        &args.out,
        &Manifest {
            command: "gradcheck",
            seed,
            config: serde_json::json!({
                "batch": args.batch,
                "gate_hidden": args.gate_hidden,
                "tolerance": GRADCHECK_TOL,
            }),
            inputs: vec![],
            outputs: paths(&[&args.out]),
        },
    )?;
    if !all_pass {
        bail!("gradient check failed");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepOmega(args) => cmd_sweep(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
