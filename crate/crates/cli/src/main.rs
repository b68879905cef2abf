use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axon_core::metrics::{evaluate_batch, to_unit_range};
use axon_core::phantom::{generate_dataset, PhantomSpec, Split};
use axon_core::pipeline::{
    dataset_options, default_spec, infer_sample, prepare, register_and_align, run_ablation, run_pipeline, train_coarse,
    train_fine, train_prior, train_sr, write_mid_slices, Ablation, InferenceMode, Models, PipelineConfig, TrainReport,
};
use axon_core::preprocess::{rescale_to_grid, standardize_projection, window_and_normalize, NormTarget, WindowSpec};
use axon_core::projector::{default_geometries, hu_to_attenuation, render_drr, render_drr_noisy};
use axon_core::voxcore::{encode_pgm16, load_pgm16, load_vvol, save_vvol};
use axon_core::{Error, Result, SeededRng, ViewTag, Volume};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "axon", version, about = "X-ray to CT reconstruction pipeline on procedural phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Pipeline configuration (TOML). AXON_SEED overrides its seed.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Ignore existing checkpoints and start from epoch 1.
    #[arg(long)]
    restart: bool,
    /// Train the weights of an ablation variant instead of the base config.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewArg {
    Pa,
    Lateral,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SampleStage {
    Coarse,
    Fine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset named in the config.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Phantom spec (TOML); defaults to the built-in thorax phantom on the
        /// config's output grid.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Render a DRR of an HU volume to a 16-bit PGM.
    Drr {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pa")]
        view: ViewArg,
        #[arg(long, default_value_t = 1000.0)]
        sid_mm: f64,
        #[arg(long, default_value_t = 64)]
        pixels: usize,
        /// Detector noise σ on the transmitted intensity.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preprocess one volume (resample + window + normalize) or one projection
    /// (resize + normalize, optional registration).
    Preprocess {
        #[arg(long, conflicts_with = "projection")]
        volume: Option<PathBuf>,
        #[arg(long)]
        projection: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Target grid for volumes, e.g. `16,16,16`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        #[arg(long, default_value_t = -100.0, allow_negative_numbers = true)]
        window_lo: f64,
        #[arg(long, default_value_t = 900.0, allow_negative_numbers = true)]
        window_hi: f64,
        /// Square side for projections.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Register the projection onto this reference PGM after resizing.
        #[arg(long)]
        register_to: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        radius: usize,
    },
    /// Train the coarse (2D→3D bridge) stage.
    TrainCoarse(TrainArgs),
    /// Train the unconditional fine-stage prior.
    TrainPrior(TrainArgs),
    /// Train the fine-stage control branch; needs the prior.
    TrainFine(TrainArgs),
    /// Train the super-resolution stage.
    TrainSr(TrainArgs),
    /// Run inference up to one stage on the test split.
    Sample {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        stage: SampleStage,
        /// Also run the SR stage on the result.
        #[arg(long)]
        with_sr: bool,
        /// Restrict to one subject id.
        #[arg(long)]
        id: Option<String>,
        /// Output directory; defaults to `<output>/samples`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full inference and evaluation on the test split.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Output directory; defaults to the config's output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted volumes against references.
    Metrics {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        /// Window HU references to [-1, 1] with `lo,hi` before scoring.
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<(f64, f64)>,
        /// Write the JSON-lines report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one ablation variant.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// One of: clamping, bi-planar, drr-mix, coarse-only, fine-only.
        #[arg(long = "switch", required = true)]
        switches: Vec<String>,
    },
    /// Export axial, sagittal and coronal mid-slices of a volume.
    Slices {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "slice")]
        prefix: String,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad number `{x}`"))).collect()
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s)?.try_into().map_err(|_| format!("expected three comma-separated sizes, got `{s}`"))
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list(s)?[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(format!("expected `lo,hi`, got `{s}`")),
    }
}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&arg.config)?;
    if let Ok(s) = std::env::var("AXON_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("AXON_SEED must be an unsigned integer, got `{s}`")))?;
    }
    Ok(cfg)
}

fn variant(cfg: PipelineConfig, ablation: &Option<String>) -> Result<PipelineConfig> {
    match ablation {
        Some(s) => Ok(s.parse::<Ablation>()?.apply(&cfg).0),
        None => Ok(cfg),
    }
}

fn train_summary(r: &TrainReport) -> serde_json::Value {
    json!({
        "command": format!("train-{}", r.stage),
        "checkpoint": r.checkpoint.display().to_string(),
        "resumed_from_epoch": r.resumed_from,
        "epochs_run": r.losses.len(),
        "final_loss": r.losses.last().map(|l| l.loss),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Phantom { cfg, spec } => {
            let cfg = load_config(&cfg)?;
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    let mut s = PhantomSpec::from_toml(&text)?;
                    if std::env::var("AXON_SEED").is_ok() {
                        s.seed = cfg.seed;
                    }
                    s
                }
                None => default_spec(&cfg),
            };
            let recs = generate_dataset(&spec, cfg.data.n_phantoms, &cfg.paths.dataset, &dataset_options(&cfg))?;
            let count = |s: Split| recs.iter().filter(|r| r.split == s).count();
            Ok(json!({
                "command": "phantom",
                "dir": cfg.paths.dataset.display().to_string(),
                "n": recs.len(),
                "train": count(Split::Train),
                "val": count(Split::Val),
                "test": count(Split::Test),
            }))
        }
        Command::Drr { volume, out, view, sid_mm, pixels, noise, seed } => {
            let v = load_vvol(&volume)?;
            let (pa, lat) = default_geometries(&v, sid_mm, pixels)?;
            let cam = match view {
                ViewArg::Pa => pa,
                ViewArg::Lateral => lat,
            };
            let av = hu_to_attenuation(&v)?;
            let p = if noise > 0.0 {
                render_drr_noisy(&av, &cam, noise, &mut SeededRng::new(seed, 0))?
            } else {
                render_drr(&av, &cam)?
            };
            ensure_parent(&out)?;
            fs::write(&out, encode_pgm16(&p)?)?;
            Ok(json!({"command": "drr", "out": out.display().to_string(), "dims": p.dims()}))
        }
        Command::Preprocess { volume, projection, out, dims, window_lo, window_hi, size, register_to, radius } => {
            ensure_parent(&out)?;
            if let Some(vp) = volume {
                let v = load_vvol(&vp)?;
                let v = match dims {
                    Some(d) => rescale_to_grid(&v, d)?,
                    None => v,
                };
                let v = window_and_normalize(&v, WindowSpec::new(window_lo, window_hi)?, NormTarget::Pm1)?;
                save_vvol(&v, &out)?;
                Ok(json!({"command": "preprocess", "out": out.display().to_string(), "dims": v.dims()}))
            } else if let Some(pp) = projection {
                let p = standardize_projection(&load_pgm16(&pp, 1.0, ViewTag::Pa)?, [size, size])?;
                let (p, shift) = match register_to {
                    Some(r) => {
                        let reference = standardize_projection(&load_pgm16(&r, 1.0, ViewTag::Pa)?, [size, size])?;
                        let s = axon_core::preprocess::register_to_reference(&p, &reference, radius)?;
                        (register_and_align(&p, &reference, radius)?, Some([s.dx, s.dy]))
                    }
                    None => (p, None),
                };
                fs::write(&out, encode_pgm16(&p)?)?;
                Ok(json!({"command": "preprocess", "out": out.display().to_string(), "dims": p.dims(), "shift": shift}))
            } else {
                Err(Error::InvalidArgument("preprocess needs --volume or --projection".into()))
            }
        }
        Command::TrainCoarse(a) => {
            let cfg = variant(load_config(&a.cfg)?, &a.ablation)?;
            Ok(train_summary(&train_coarse(&cfg, &prepare(&cfg)?, a.restart)?))
        }
        Command::TrainPrior(a) => {
            let cfg = variant(load_config(&a.cfg)?, &a.ablation)?;
            Ok(train_summary(&train_prior(&cfg, &prepare(&cfg)?, a.restart)?))
        }
        Command::TrainFine(a) => {
            let cfg = variant(load_config(&a.cfg)?, &a.ablation)?;
            Ok(train_summary(&train_fine(&cfg, &prepare(&cfg)?, a.restart)?))
        }
        Command::TrainSr(a) => {
            let cfg = variant(load_config(&a.cfg)?, &a.ablation)?;
            Ok(train_summary(&train_sr(&cfg, &prepare(&cfg)?, a.restart)?))
        }
        Command::Sample { cfg, stage, with_sr, id, out } => {
            let mut cfg = load_config(&cfg)?;
            if !with_sr {
                cfg.model.gamma = 1;
            }
            let mode = match stage {
                SampleStage::Coarse => InferenceMode::CoarseOnly,
                SampleStage::Fine => InferenceMode::for_config(&cfg),
            };
            let data = prepare(&cfg)?;
            let subjects: Vec<_> = match &id {
                Some(id) => data.samples.iter().filter(|s| &s.id == id).collect(),
                None => data.split(Split::Test),
            };
            let first = subjects
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("no subject matches {:?}", id)))?;
            let models = Models::load(&cfg, mode, first.target.spacing())?;
            let out = out.unwrap_or_else(|| cfg.paths.output.join("samples"));
            fs::create_dir_all(&out)?;
            let mut files = Vec::new();
            for s in subjects {
                let o = infer_sample(&cfg, &models, mode, s)?;
                let skip_fine = matches!(stage, SampleStage::Coarse);
                for (tag, v) in [("coarse", &o.coarse), ("fine", if skip_fine { &None } else { &o.fine }), ("sr", &o.sr)] {
                    if let Some(v) = v {
                        let name = format!("{}_{tag}.vvol", s.id);
                        save_vvol(v, out.join(&name))?;
                        files.push(name);
                    }
                }
            }
            Ok(json!({"command": "sample", "out": out.display().to_string(), "files": files}))
        }
        Command::Pipeline { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.paths.output.clone());
            let r = run_pipeline(&cfg, InferenceMode::for_config(&cfg), &out)?;
            Ok(json!({
                "command": "pipeline",
                "out": out.display().to_string(),
                "n": r.report.per_sample.len(),
                "mean": r.report.mean,
                "std": r.report.std,
                "mean_volume_baseline": r.baseline.mean,
            }))
        }
        Command::Metrics { pred, truth, window, out } => {
            if pred.len() != truth.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} predictions but {} references",
                    pred.len(),
                    truth.len()
                )));
            }
            let mut pairs = Vec::with_capacity(pred.len());
            for (p, t) in pred.iter().zip(&truth) {
                let mut tv: Volume = load_vvol(t)?;
                if let Some((lo, hi)) = window {
                    tv = window_and_normalize(&tv, WindowSpec::new(lo, hi)?, NormTarget::Pm1)?;
                }
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                pairs.push((id, load_vvol(p)?, tv));
            }
            let report = evaluate_batch(&pairs)?;
            match out {
                Some(path) => {
                    ensure_parent(&path)?;
                    fs::write(&path, report.to_jsonl()?)?;
                    Ok(json!({"command": "metrics", "out": path.display().to_string(), "mean": report.mean, "std": report.std}))
                }
                None => {
                    print!("{}", report.to_jsonl()?);
                    Ok(serde_json::Value::Null)
                }
            }
        }
        Command::Ablate { cfg, switches } => {
            let cfg = load_config(&cfg)?;
            let ablation = Ablation::from_switches(&switches)?;
            let r = run_ablation(&cfg, ablation)?;
            Ok(json!({
                "command": "ablate",
                "switch": ablation.name(),
                "out": r.out_dir.display().to_string(),
                "n": r.report.per_sample.len(),
                "mean": r.report.mean,
                "std": r.report.std,
            }))
        }
        Command::Slices { volume, out_dir, prefix } => {
            let v = load_vvol(&volume)?;
            fs::create_dir_all(&out_dir)?;
            let unit = to_unit_range(&v)?;
            let files = write_mid_slices(&unit, &out_dir, &prefix)?;
            Ok(json!({"command": "slices", "files": files}))
        }
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = json!({"error": kind, "message": message.replace('\n', " ")});
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim());
        }
    };
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
