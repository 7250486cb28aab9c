//! Single-binary CLI: data generation, training, evaluation, inference, and
//! attention introspection. Exit codes: 0 success, 1 usage error, 2 data or
//! config error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use waca_core::backbone::AttentionKind;
use waca_core::metrics::hotspot_mask;
use waca_core::pdn::gen_case;
use waca_core::{Tape, Tensor};

use waca::checkpoint::ModelCheckpoint;
use waca::config::RunConfig;
use waca::error::WacaError;
use waca::eval::{evaluate_case, render_report, render_scatter, summarize};
use waca::manifest::RunManifest;
use waca::train::{render_log, train};
use waca::{casedir, wtns};

#[derive(Parser)]
#[command(name = "waca", version, about = "IR-drop surrogate workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; omitted sections use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cases under OUT/case_<seed>/.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Number of cases; seeds run seed..seed+count-1.
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted for interface stability; generation is serial and its
        /// output is identical for any worker count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train a model; writes checkpoint, training log, and manifest.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Training dataset root (case_<seed> directories).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset root.
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides unet.attention_kind (none|se|cbam|waca_se|waca_cbam).
        #[arg(long)]
        attention_kind: Option<String>,
        /// Accepted for interface stability; results are worker-independent.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score a checkpoint over a dataset; writes report.csv and manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run inference at this square resolution (resample in and out).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Predict one case; writes the map, masks, error map, and scatter data.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One case_<seed> directory.
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Export the two-stage channel-attention scores of every block.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(arg: &ConfigArg) -> Result<(RunConfig, String), WacaError> {
    match &arg.config {
        Some(path) => Ok((RunConfig::load(path)?, path.display().to_string())),
        None => Ok((RunConfig::default(), String::from("<defaults>"))),
    }
}

/// Seed precedence: flag, then the WACA_SEED environment variable, then the
/// config (or zero where no config field applies).
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, WacaError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("WACA_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|e| WacaError::Usage(format!("WACA_SEED must be an integer: {e}"))),
        Err(_) => Ok(fallback),
    }
}

fn ensure_dir(path: &Path) -> Result<(), WacaError> {
    std::fs::create_dir_all(path).map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))
}

fn hardware_string() -> String {
    format!("{} {}", std::env::consts::OS, std::env::consts::ARCH)
}

fn run(cli: Cli) -> Result<(), WacaError> {
    match cli.command {
        Command::GenData { config, out, count, seed, workers: _ } => {
            let (cfg, cfg_path) = load_config(&config)?;
            let seed = resolve_seed(seed, 0)?;
            if count == 0 {
                return Err(WacaError::Usage("--count must be positive".into()));
            }
            ensure_dir(&out)?;
            let manifest = RunManifest::start("gen-data", &cfg_path, seed);
            for s in seed..seed + count {
                let case = gen_case(s, &cfg.gen).map_err(WacaError::Numerical)?;
                casedir::write_case(&out, &case)?;
            }
            manifest.finish(&out)?;
            println!("wrote {count} cases to {}", out.display());
            Ok(())
        }
        Command::Train { config, data, val, out, seed, epochs, attention_kind, workers: _ } => {
            let (mut cfg, cfg_path) = load_config(&config)?;
            if let Some(kind) = &attention_kind {
                cfg.unet.attention_kind = AttentionKind::parse(kind).ok_or_else(|| {
                    WacaError::Usage(format!("unknown attention kind `{kind}`"))
                })?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.seed = resolve_seed(seed, cfg.train.seed)?;
            cfg.validate()?;
            let train_set = casedir::load_dataset(&data)?;
            let val_set = casedir::load_dataset(&val)?;
            ensure_dir(&out)?;
            let manifest = RunManifest::start("train", &cfg_path, cfg.train.seed);
            let outcome =
                train(&cfg.unet, &train_set, &val_set, &cfg.train, &cfg.loss, cfg.hotspot)?;
            outcome.best.save(&out.join("model.wckp"))?;
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, render_log(&outcome.log))
                .map_err(|e| WacaError::Io(format!("{}: {e}", log_path.display())))?;
            manifest.finish(&out)?;
            println!(
                "best epoch {} val_f1 {:.4}; artifacts in {}",
                outcome.best.epoch,
                outcome.best.val_f1,
                out.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, out, resolution } => {
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let case_dirs = casedir::list_cases(&data)?;
            ensure_dir(&out)?;
            let manifest = RunManifest::start("eval", &checkpoint.display().to_string(), 0);
            let mut reports = Vec::with_capacity(case_dirs.len());
            for dir in &case_dirs {
                let case = casedir::read_case(dir)?;
                let id = dir.file_name().unwrap().to_string_lossy().into_owned();
                let (report, _) = evaluate_case(&ck, &id, &case, ck_hotspot(), resolution)?;
                reports.push(report);
            }
            let summary = summarize(&reports);
            let csv = render_report(&reports, &summary, &hardware_string());
            let path = out.join("report.csv");
            std::fs::write(&path, csv)
                .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))?;
            manifest.finish(&out)?;
            println!(
                "mean MAE {:.4} mV, mean F1 {:.4} (std {:.4}) over {} cases",
                summary.mean_mae_mv,
                summary.mean_f1,
                summary.f1_std,
                reports.len()
            );
            Ok(())
        }
        Command::Infer { checkpoint, case, out, resolution } => {
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let bundle = casedir::read_case(&case)?;
            ensure_dir(&out)?;
            let manifest = RunManifest::start("infer", &checkpoint.display().to_string(), 0);
            let id = case.file_name().unwrap().to_string_lossy().into_owned();
            let (report, pred) =
                evaluate_case(&ck, &id, &bundle, ck_hotspot(), resolution)?;
            wtns::save(&out.join("pred.wtns"), &pred)?;
            let to_map = |mask: Vec<bool>, shape: &[usize]| {
                Tensor::from_vec(shape, mask.iter().map(|&b| f64::from(u8::from(b))).collect())
                    .expect("mask shape")
            };
            let pm = hotspot_mask(&pred, ck_hotspot());
            let tm = hotspot_mask(&bundle.target, ck_hotspot());
            wtns::save(&out.join("pred_mask.wtns"), &to_map(pm, pred.shape()))?;
            wtns::save(&out.join("target_mask.wtns"), &to_map(tm, bundle.target.shape()))?;
            let mut err_map = pred.clone();
            for (e, t) in err_map.data_mut().iter_mut().zip(bundle.target.data()) {
                *e = (*e - t).abs();
            }
            wtns::save(&out.join("abs_error.wtns"), &err_map)?;
            let scatter_path = out.join("scatter.csv");
            std::fs::write(&scatter_path, render_scatter(&pred, &bundle.target))
                .map_err(|e| WacaError::Io(format!("{}: {e}", scatter_path.display())))?;
            manifest.finish(&out)?;
            println!("MAE {:.4} mV, F1 {:.4}; artifacts in {}", report.mae_mv, report.f1, out.display());
            Ok(())
        }
        Command::InspectAttn { checkpoint, case, out } => {
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let kind = ck.model.config.attention_kind;
            if !matches!(kind, AttentionKind::WacaSe | AttentionKind::WacaCbam) {
                return Err(WacaError::Data(format!(
                    "checkpoint uses attention kind `{}`; two-stage scores exist only for waca_se and waca_cbam",
                    kind.as_str()
                )));
            }
            let bundle = casedir::read_case(&case)?;
            ensure_dir(&out)?;
            let manifest = RunManifest::start("inspect-attn", &checkpoint.display().to_string(), 0);
            let features = waca_core::augment::apply_zscore(&bundle.features, &ck.norm_stats)
                .map_err(WacaError::Data)?;
            let mut tape = Tape::new();
            let shape = [&[1usize][..], features.shape()].concat();
            let x = tape.leaf(
                Tensor::from_vec(&shape, features.data().to_vec())
                    .map_err(|e| WacaError::Data(e.to_string()))?,
            );
            let mv = ck.model.bind(&mut tape);
            let (_, states) =
                waca_core::backbone::unet_forward_with_state(&mut tape, x, &mv)
                    .map_err(|e| WacaError::Data(e.to_string()))?;
            let mut csv = String::from("block,channel,stage1,stage2,fused\n");
            for (b, state) in states.iter().enumerate() {
                let state = state.as_ref().ok_or_else(|| {
                    WacaError::Data(format!("block {b} carries no attention state"))
                })?;
                let c = state.a1.numel();
                for ch in 0..c {
                    csv.push_str(&format!(
                        "{b},{ch},{},{},{}\n",
                        state.a1.data()[ch],
                        state.a2.data()[ch],
                        state.fused.data()[ch]
                    ));
                }
            }
            let path = out.join("attn.csv");
            std::fs::write(&path, csv)
                .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))?;
            manifest.finish(&out)?;
            println!("exported attention scores for {} blocks to {}", states.len(), out.display());
            Ok(())
        }
    }
}

/// Scoring threshold used by the read-only commands. The ratio is part of
/// the published protocol rather than a tunable, so the default is fixed.
fn ck_hotspot() -> waca_core::metrics::HotspotConfig {
    waca_core::metrics::HotspotConfig::default()
}
