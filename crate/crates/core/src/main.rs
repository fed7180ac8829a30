use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autobid::harness::{self, RunConfig};
use autobid::loss::{LossKind, PenaltyMode};
use autobid::model::Variant;
use autobid::Result;

#[derive(Parser)]
#[command(name = "autobid", version, about = "Offline-trained sequence bidding agents on a simulated GSP market")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behaviour dataset and split manifest.
    GenData(Common),
    /// Train a model on the dataset.
    Train(Common),
    /// Score a checkpoint over the budget-ratio grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score the four ablation rows at 100% budget.
    Ablate(Common),
    /// Matched-vs-shuffled embedding similarity for two checkpoints.
    Xcorr {
        #[command(flatten)]
        common: Common,
        /// CLB-DT checkpoint.
        #[arg(long)]
        c2: PathBuf,
        /// Vanilla DT checkpoint.
        #[arg(long)]
        dt: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (default: <out>/dataset.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    penalty_mode: Option<PenaltyMode>,
    #[arg(long)]
    budget_ratio: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Start from the full-scale defaults instead of the desk-scale ones.
    #[arg(long)]
    full_scale: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.full_scale => RunConfig::full_scale(),
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.dataset = Some(d.clone());
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(l) = self.loss {
            cfg.loss_kind = l;
        }
        if let Some(m) = self.penalty_mode {
            cfg.penalty.mode = m;
        }
        if let Some(r) = self.budget_ratio {
            cfg.budget_ratios = vec![r];
        }
        if let Some(i) = self.iterations {
            cfg.max_iterations = i;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let r = harness::cmd_gen_data(&cfg)?;
            println!(
                "wrote {} episodes ({} train / {} validation) to {}",
                r.episodes,
                r.train_episodes,
                r.validation_episodes,
                r.dataset_path.display()
            );
            println!("cpa compliant {}  violating {}  sha256 {}", r.cpa_compliant, r.cpa_violating, r.dataset_fingerprint);
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let out = harness::cmd_train(&cfg)?;
            let r = &out.report;
            for rec in &out.history {
                println!("iter {:>6}  smoothed loss {:.6}", rec.iteration, rec.smoothed);
            }
            println!(
                "{} / {}: {} parameters, loss {:.5} -> {:.5} in {:.1}s",
                r.variant, r.loss_kind, r.num_parameters, r.baseline_loss, r.final_loss, r.seconds
            );
            if let Some(v) = r.validation_loss {
                println!("validation loss {v:.5}");
            }
            println!("checkpoint {}", cfg.output_dir.join("model.ckpt").display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let r = harness::cmd_eval(&cfg, &checkpoint)?;
            print!("{}", harness::render_eval(&r));
        }
        Command::Ablate(c) => {
            let cfg = c.resolve()?;
            let r = harness::cmd_ablate(&cfg)?;
            print!("{}", harness::render_ablation(&r));
        }
        Command::Xcorr { common, c2, dt, samples } => {
            let cfg = common.resolve()?;
            let n = samples.unwrap_or(cfg.xcorr_samples);
            let r = harness::cmd_xcorr(&cfg, &c2, &dt, n)?;
            print!("{}", harness::render_xcorr(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
