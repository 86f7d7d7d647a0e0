use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use segtad::data::{generate, load_class_scores, PredictionFile};
use segtad::eval::evaluate;
use segtad::gradcheck::{run_all, GradcheckConfig};
use segtad::pipeline::{last_checkpoint_path, train, Dataset, Model};
use segtad::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "segtad", version, about = "Temporal action detection by 1D segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train on a dataset; writes checkpoints and loss_log.csv into the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Disable the segmentation loss.
        #[arg(long)]
        no_seg_loss: bool,
    },
    /// Detect actions with a trained model; writes predictions.json.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Defaults to run/checkpoints/last.stad.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-video class scores (JSON) fused into detection scores.
        #[arg(long)]
        class_scores: Option<PathBuf>,
        #[arg(long)]
        subset: Option<String>,
        /// Defaults to run/predictions.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against annotations; prints the mAP table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved config as JSON.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every op and of the full network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take defaults. Without it the desk config is used
    /// (for infer, run/config.json when present).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self, fallback: Option<&Path>) -> Result<Config> {
        let mut c = match (&self.config, fallback) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(p)) if p.exists() => Config::load(p)?,
            _ => {
                let mut c = Config::desk();
                c.apply_env()?;
                c
            }
        };
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let kind = e.kind();
            let msg = msg.strip_prefix(&format!("{kind}: ")).unwrap_or(&msg);
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData { common, out, videos, noise } => {
            let mut c = common.resolve(None)?;
            if let Some(n) = videos {
                c.synthetic.n_videos = n;
            }
            if let Some(s) = noise {
                c.synthetic.noise = s;
            }
            let ds = generate(&c.synthetic)?;
            ds.write(&out)?;
            println!("wrote {} videos to {}", ds.videos.len(), out.display());
        }
        Cmd::Train { common, data, run, subset, epochs, lr, no_seg_loss } => {
            let mut c = common.resolve(None)?;
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            if let Some(l) = lr {
                c.train.lr = l;
            }
            if no_seg_loss {
                c.train.use_seg_loss = false;
            }
            c.validate()?;
            let ds = Dataset::open(&data)?;
            let mut model = Model::new(c)?;
            let samples = ds.samples(&model, subset.as_deref())?;
            std::fs::create_dir_all(&run).map_err(|e| Error::Io { path: run.clone(), source: e })?;
            model.config.save(&run.join("config.json"))?;
            let start = Instant::now();
            train(&mut model, &samples, Some(&run), |r| {
                println!(
                    "epoch {:>4}  lr {:.1e}  total {:.5}  seg {:.5}  det {:.5}  aux {:.5}",
                    r.epoch, r.lr, r.total, r.seg, r.det, r.aux
                );
            })?;
            println!(
                "trained on {} videos in {:.1}s; checkpoint {}",
                samples.len(),
                start.elapsed().as_secs_f64(),
                last_checkpoint_path(&run).display()
            );
        }
        Cmd::Infer { common, data, run, checkpoint, class_scores, subset, out } => {
            let c = common.resolve(Some(&run.join("config.json")))?;
            let ck = checkpoint.unwrap_or_else(|| last_checkpoint_path(&run));
            let model = Model::load(c, &ck)?;
            let ds = Dataset::open(&data)?;
            let scores = class_scores.as_deref().map(load_class_scores).transpose()?;
            let preds = ds.predict(&model, subset.as_deref(), scores.as_ref())?;
            let out = out.unwrap_or_else(|| run.join("predictions.json"));
            preds.save(&out)?;
            let n: usize = preds.results.values().map(Vec::len).sum();
            println!("wrote {n} detections for {} videos to {}", preds.results.len(), out.display());
        }
        Cmd::Eval { data, predictions, subset, out } => {
            let ds = Dataset::open(&data)?;
            let preds = PredictionFile::load(&predictions)?;
            let report = evaluate(&preds, &ds.annotations, &ds.manifest, subset.as_deref())?;
            print!("{}", report.to_table());
            if let Some(o) = out {
                report.save(&o)?;
            }
        }
        Cmd::PrintConfig { common } => {
            let c = common.resolve(None)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Cmd::Gradcheck { seed, trials } => {
            let report = run_all(&GradcheckConfig { seed, trials, ..Default::default() })?;
            print!("{}", report.to_table());
            if !report.passed() {
                eprintln!("error: gradcheck: max relative error {:.3e} exceeds {:.0e}", report.worst(), report.tolerance);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
