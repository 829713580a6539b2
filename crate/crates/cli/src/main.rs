//! `panreg`: synthesize data, train, register and evaluate.
//!
//! Every subcommand writes line-delimited JSON records to stdout, except
//! `evaluate`, which prints the metrics table. Errors go to stderr as one
//! JSON record. Exit status: 0 success, 1 invalid input, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use panreg_core::config::{parse_levels, parse_pairs};
use panreg_core::io::dataset::MANIFEST_NAME;
use panreg_core::io::{
    load_checkpoint, load_labels, load_volume, preprocess, read_pair_manifest, save_checkpoint, save_dataset, save_field,
    save_labels, save_volume, PreprocessSpec,
};
use panreg_core::{
    evaluate_entries, generate_dataset, network_grid, register_pair, Error, PanModel, Result, SynthConfig, TrainConfig,
    TrainPair, Trainer,
};

#[derive(Parser)]
#[command(name = "panreg", version, about = "Pyramid attention network for deformable 3D registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of moving/fixed pairs with labels.
    Synth(SynthArgs),
    /// Train a model on the pairs listed in a dataset manifest.
    Train(TrainArgs),
    /// Register one moving image to one fixed image.
    Register(RegisterArgs),
    /// Register every pair of a manifest and report DSC, ASSD and folding.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives NIfTI files and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of pairs.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Cube side in voxels, a multiple of 16.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    /// Peak ground-truth displacement in voxels.
    #[arg(long, default_value_t = 3.0)]
    max_disp: f64,
    /// Scale the fixed image by a random factor in [0.9, 1].
    #[arg(long)]
    bias: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Smoothness weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Orthogonality weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Cube side of the training grid; defaults to the data dims rounded up
    /// to a multiple of 16.
    #[arg(long)]
    size: Option<usize>,
    /// Heads per level, deepest first, e.g. `8,4,2,1,1`.
    #[arg(long)]
    heads: Option<String>,
    /// Checkpoint path, written periodically and at the end.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory for `model.ckpt` when `--ckpt` is not given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Moving labels to warp with nearest-neighbour sampling.
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for warped.nii.gz, field.nii.gz and warped_labels.nii.gz.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report ASSD in physical units from the fixed image spacing instead
    /// of voxels.
    #[arg(long)]
    physical_spacing: bool,
}

fn log(record: serde_json::Value) {
    println!("{record}");
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: [a.size; 3],
        n_labels: a.labels,
        max_disp: a.max_disp,
        bias: a.bias,
    };
    let (pairs, manifest) = generate_dataset(a.seed, a.count, &cfg)?;
    let path = save_dataset(&a.out, &pairs, &manifest)?;
    for (i, (seed, sum)) in manifest.pairs.iter().enumerate() {
        log(json!({"event": "pair", "index": i, "seed": seed, "sha256": sum}));
    }
    log(json!({"event": "done", "manifest": path, "count": pairs.len()}));
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) if !p.is_file() => return Err(Error::FileNotFound(p.clone())),
        Some(p) => {
            let mut c = TrainConfig::default();
            for (line, k, v) in parse_pairs(&fs::read_to_string(p)?)? {
                c.set(line, &k, &v)?;
            }
            c
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.alpha {
        cfg.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(h) = &a.heads {
        cfg.model.heads = parse_levels(h).map_err(|e| Error::Config(format!("--heads {h}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_pairs(data: &Path, size: Option<usize>) -> Result<Vec<TrainPair>> {
    let entries = read_pair_manifest(manifest_path(data))?;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let moving = load_volume(&e.moving)?;
        let fixed = load_volume(&e.fixed)?;
        if moving.dims() != fixed.dims() {
            return Err(Error::ShapeMismatch {
                left: format!("{} {:?}", e.moving.display(), moving.dims()),
                right: format!("{} {:?}", e.fixed.display(), fixed.dims()),
            });
        }
        let target = size.map_or_else(|| network_grid(fixed.dims()), |s| [s; 3]);
        let spec = PreprocessSpec::new(target)?;
        pairs.push(TrainPair {
            moving: preprocess(&moving, &spec)?,
            fixed: preprocess(&fixed, &spec)?,
        });
    }
    Ok(pairs)
}

fn train(a: TrainArgs) -> Result<()> {
    let ckpt_path = match (&a.ckpt, &a.out) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => {
            fs::create_dir_all(dir)?;
            dir.join("model.ckpt")
        }
        (None, None) => return Err(Error::Config("give --ckpt or --out for the checkpoint".into())),
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(p)?)?;
            if let Some(s) = a.steps {
                t.config.steps = s;
            }
            t
        }
        None => Trainer::new(train_config(&a)?)?,
    };
    let pairs = load_training_pairs(&a.data, a.size)?;
    log(json!({
        "event": "start",
        "pairs": pairs.len(),
        "parameters": trainer.adam.m.len(),
        "from_step": trainer.step,
        "steps": trainer.config.steps,
    }));
    let every = trainer.config.checkpoint_every;
    let path = ckpt_path.clone();
    trainer.run(&pairs, |t, rec| {
        let mut v = serde_json::to_value(rec).expect("numeric record");
        v["event"] = json!("step");
        log(v);
        if every > 0 && rec.step % every == 0 {
            save_checkpoint(&path, &t.checkpoint())?;
            log(json!({"event": "checkpoint", "step": rec.step, "path": path}));
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    log(json!({"event": "done", "step": trainer.step, "checkpoint": ckpt_path}));
    Ok(())
}

fn model_from(ckpt: &Path) -> Result<PanModel> {
    let c = load_checkpoint(ckpt)?;
    Ok(PanModel {
        config: c.config.model,
        params: c.params,
    })
}

fn register(a: RegisterArgs) -> Result<()> {
    let moving = load_volume(&a.moving)?;
    let fixed = load_volume(&a.fixed)?;
    if moving.dims() != fixed.dims() {
        return Err(Error::ShapeMismatch {
            left: format!("moving {:?}", moving.dims()),
            right: format!("fixed {:?}", fixed.dims()),
        });
    }
    let labels = a.moving_labels.as_ref().map(load_labels).transpose()?;
    let model = model_from(&a.ckpt)?;
    let r = register_pair(&model, &moving, &fixed, labels.as_ref())?;
    fs::create_dir_all(&a.out)?;
    let warped = a.out.join("warped.nii.gz");
    let field = a.out.join("field.nii.gz");
    save_volume(&warped, &r.warped.clone().with_spacing(fixed.spacing()))?;
    save_field(&field, &r.field)?;
    let warped_labels = match &r.warped_labels {
        Some(l) => {
            let p = a.out.join("warped_labels.nii.gz");
            save_labels(&p, l)?;
            Some(p)
        }
        None => None,
    };
    log(json!({
        "event": "registered",
        "warped": warped,
        "field": field,
        "warped_labels": warped_labels,
        "max_displacement": r.field.max_magnitude(),
        "seconds": r.seconds,
    }));
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<bool> {
    let model = model_from(&a.ckpt)?;
    let entries = read_pair_manifest(manifest_path(&a.manifest))?;
    let ev = evaluate_entries(&model, &entries, a.physical_spacing);
    let table = ev.to_table();
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    for p in &ev.pairs {
        eprintln!("{}", json!({"event": "pair", "index": p.index, "seconds": p.seconds}));
    }
    Ok(ev.is_ok())
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"event": "error", "kind": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Register(a) => register(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => fail("runtime", "one or more pairs failed to evaluate".into(), 2),
        Err(e) if e.is_validation() => fail("validation", e.to_string(), 1),
        Err(e) => fail("runtime", e.to_string(), 2),
    }
}
