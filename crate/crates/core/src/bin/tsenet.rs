use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tsenet::audio::read_wav;
use tsenet::audio::write_wav;
use tsenet::graph::gradcheck::FD_TOLERANCE;
use tsenet::model::TseNetModel;
use tsenet::pipeline::{self, PipelineConfig};
use tsenet::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tsenet", version, about = "Time-domain target speaker extraction toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file or preset name (default, selftest, paper, tiny, tiny-plus).
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Work directory holding every artifact.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    /// Overrides the pipeline, synthesis and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance stages; 1 keeps every stage serial.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long = "M", global = true)]
    m: Option<usize>,
    #[arg(long = "L", global = true)]
    l: Option<usize>,
    #[arg(long = "N", global = true)]
    n: Option<usize>,
    #[arg(long = "O", global = true)]
    o: Option<usize>,
    #[arg(long = "P", global = true)]
    p: Option<usize>,
    #[arg(long = "b", global = true)]
    b: Option<usize>,
    #[arg(long = "r", global = true)]
    r: Option<usize>,
    /// i-vector dimension; also sets the number of TV factors.
    #[arg(long = "D1", global = true)]
    d1: Option<usize>,
    #[arg(long = "D2", global = true)]
    d2: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Mix train/dev/test corpora (synthesizing utterances if none are configured).
    Simulate {
        /// Number of training mixtures.
        #[arg(long)]
        count: Option<usize>,
        /// SNR range in dB as LOW:HIGH.
        #[arg(long)]
        snr: Option<String>,
        /// Utterance CSV (speaker_id,gender,path).
        #[arg(long)]
        utterances: Option<String>,
    },
    /// MFCC + energy, deltas, CMN and VAD for every utterance.
    Features {
        /// Also write each utterance's matrix as `<DIR>/<id>.csv`.
        #[arg(long)]
        dump_csv: Option<PathBuf>,
    },
    TrainUbm,
    TrainTv,
    /// Per-utterance and pooled per-speaker i-vectors.
    Ivector,
    Train,
    /// Extract one mixture, or the whole test set when --mixture is absent.
    Extract {
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long)]
        ivector: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Evaluate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        taps: Option<usize>,
    },
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        /// Output path; `.pgm` writes an image, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operator and of the end-to-end loss.
    Gradcheck,
    /// Full desk-scale pipeline on synthetic audio.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Features { .. } => "features",
            Command::TrainUbm => "train-ubm",
            Command::TrainTv => "train-tv",
            Command::Ivector => "ivector",
            Command::Train => "train",
            Command::Extract { .. } => "extract",
            Command::Evaluate { .. } => "evaluate",
            Command::Spectrogram { .. } => "spectrogram",
            Command::Gradcheck => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

fn resolve_config(c: &Common, command: &Command) -> Result<PipelineConfig> {
    let mut cfg = if matches!(command, Command::Selftest) && c.config == "default" {
        PipelineConfig::selftest()
    } else {
        PipelineConfig::load(&c.config)?
    };
    if let Some(w) = &c.work {
        cfg.paths.work_dir = w.display().to_string();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    let m = &mut cfg.model;
    for (flag, slot) in [
        (c.m, &mut m.m),
        (c.l, &mut m.l),
        (c.n, &mut m.n),
        (c.o, &mut m.o),
        (c.p, &mut m.p),
        (c.b, &mut m.b),
        (c.r, &mut m.r),
        (c.d1, &mut m.d1),
        (c.d2, &mut m.d2),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(d1) = c.d1 {
        cfg.tv.factors = d1;
    }
    match command {
        Command::Simulate { count, snr, utterances } => {
            if let Some(n) = count {
                cfg.simulate.train_count = *n;
            }
            if let Some(range) = snr {
                let (lo, hi) = range
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::Config(format!("--snr expects LOW:HIGH, got '{range}'")))?;
                cfg.simulate.snr_low_db = lo;
                cfg.simulate.snr_high_db = hi;
            }
            if let Some(u) = utterances {
                cfg.paths.utterances = Some(u.clone());
            }
        }
        Command::Evaluate { taps: Some(t), .. } => cfg.eval.taps = *t,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let name = cli.command.name();
    log::info!("event=config subcommand={name} hash={} resolved={}", cfg.hash(), serde_json::to_string(&cfg).unwrap_or_default());
    let parallel = cli.common.jobs > 1;
    if parallel {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let started = Instant::now();
    let layout = cfg.layout();
    let outputs: Vec<PathBuf> = match &cli.command {
        Command::Simulate { .. } => pipeline::simulate(&cfg, parallel)?,
        Command::Features { dump_csv } => {
            let mut out = vec![pipeline::extract_features(&cfg, parallel)?];
            if let Some(dir) = dump_csv {
                pipeline::dump_features_csv(&cfg, dir)?;
                out.push(dir.clone());
            }
            out
        }
        Command::TrainUbm => vec![pipeline::run_train_ubm(&cfg)?],
        Command::TrainTv => vec![pipeline::run_train_tv(&cfg, parallel)?],
        Command::Ivector => pipeline::run_ivectors(&cfg, parallel)?,
        Command::Train => {
            let s = pipeline::run_train(&cfg, parallel)?;
            println!(
                "epochs={} best_epoch={} best_dev_loss={:.4} stopped_early={}",
                s.epochs, s.best_epoch, s.best_dev_loss, s.stopped_early
            );
            vec![s.checkpoint]
        }
        Command::Extract { mixture, ivector, ckpt, out } => {
            let ckpt = ckpt.clone().unwrap_or_else(|| layout.checkpoint());
            match mixture {
                Some(m) => {
                    let iv = ivector
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("--mixture needs --ivector".into()))?;
                    let out = out.clone().unwrap_or_else(|| m.with_extension("extracted.wav"));
                    let model = TseNetModel::load(&ckpt)?;
                    let est = pipeline::extract_one(&model, &read_wav(m)?, &pipeline::read_ivector_file(iv)?)?;
                    write_wav(&out, &est)?;
                    vec![out]
                }
                None => vec![pipeline::run_extract_corpus(&cfg, &ckpt, parallel)?],
            }
        }
        Command::Evaluate { ckpt, .. } => {
            let ckpt = ckpt.clone().or_else(|| Some(layout.checkpoint()).filter(|p| p.is_file()));
            let (report, outputs) = pipeline::run_evaluate(&cfg, ckpt.as_deref(), parallel)?;
            print!("{}", report.render_tables());
            outputs
        }
        Command::Spectrogram { input, out } => {
            pipeline::run_spectrogram(&cfg, input, out)?;
            vec![out.clone()]
        }
        Command::Gradcheck => {
            let results = pipeline::run_gradcheck(cfg.model, cfg.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "op={} max_rel_error={:.3e} checked={} skipped={} status={}",
                    r.name,
                    r.max_rel_error,
                    r.entries_checked,
                    r.entries_skipped,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("gradcheck ops={} worst={worst:.3e} tolerance={FD_TOLERANCE:e}", results.len());
            let report = layout.root.join("gradcheck.jsonl");
            std::fs::create_dir_all(&layout.root).map_err(|e| Error::Config(format!("{}: {e}", layout.root.display())))?;
            let lines: String = results
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "op": r.name,
                        "max_rel_error": r.max_rel_error,
                        "checked": r.entries_checked,
                        "skipped": r.entries_skipped,
                        "passed": r.passed(),
                    })
                    .to_string()
                        + "\n"
                })
                .collect();
            std::fs::write(&report, lines).map_err(|e| Error::Config(format!("{}: {e}", report.display())))?;
            pipeline::write_run_manifest(&cfg, name, started, &[report])?;
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))));
            }
            return Ok(());
        }
        Command::Selftest => {
            let out = pipeline::run_selftest(&cfg, parallel)?;
            print!("{}", out.tables);
            println!(
                "train epochs={} best_epoch={} best_dev_loss={:.4}",
                out.train.epochs, out.train.best_epoch, out.train.best_dev_loss
            );
            println!("report_digest={}", out.report_digest);
            vec![layout.eval_dir()]
        }
    };
    pipeline::write_run_manifest(&cfg, name, started, &outputs)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": e.kind(), "subcommand": command, "detail": e.to_string()})
            );
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidInput(_) => 2,
                Error::Io { .. } | Error::Manifest(_) | Error::Format { .. } | Error::Wav { .. } => 3,
                _ => 1,
            })
        }
    }
}
