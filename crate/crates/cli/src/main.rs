use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sparsegrad::calib::TransitionBasis;
use sparsegrad::harness::{
    ablate_sparsity, benchmark, calibrate, inspect_basis, inspect_checkpoint, inspect_coo, render_benchmark,
    render_summary, train, BasisSet, BenchmarkOptions, Checkpoint, ConfigOverrides, Method, RunConfig, SpeedSpec,
};
use sparsegrad::sparse::SparseCoo;
use sparsegrad::{Error, Result};

/// Sparse-gradient fine-tuning experiments on a synthetic classification task.
#[derive(Parser, Debug)]
#[command(name = "sparsegrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record gradients without training and write the transition bases.
    Calibrate(RunArgs),
    /// Train one method; writes metrics, summary and checkpoint to --out.
    Train(RunArgs),
    /// Train several methods on shared data and compare them.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated methods (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Give the top-k methods the LoRA adapter's parameter budget.
        #[arg(long)]
        match_budget: bool,
        /// Also time both converted-layer backward paths on a 512x2048 layer.
        #[arg(long)]
        layer_speed: bool,
    },
    /// Train once per top-k fraction.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
    },
    /// Rewrite a checkpoint with plain linear layers.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with the bases the checkpoint was trained with.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print statistics of a basis file (or directory), COO file or checkpoint as JSON.
    Inspect {
        #[arg(long, conflicts_with_all = ["coo", "checkpoint"])]
        basis: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        coo: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML file with any `RunConfig` keys; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rho_grad_output: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding up.sgba and down.sgba.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Calibrate bases before training.
    #[arg(long)]
    calibrate: bool,
    /// Start from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sparse_weight_decay: bool,
    #[arg(long)]
    global_step_bias_correction: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&ConfigOverrides {
            seed: self.seed,
            method: self.method,
            rho: self.rho,
            rho_grad_output: self.rho_grad_output,
            rank: self.rank,
            epochs: self.epochs,
            patience: self.patience,
            out: self.out.clone(),
            basis: self.basis.clone(),
            calibrate: self.calibrate,
            init_checkpoint: self.checkpoint.clone(),
            sparse_weight_decay: self.sparse_weight_decay,
            global_step_bias_correction: self.global_step_bias_correction,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(args) => {
            let cfg = args.resolve()?;
            if cfg.out.is_none() {
                return Err(Error::Config("calibrate needs --out <dir> for the basis files".into()));
            }
            let out = calibrate(&cfg)?;
            emit(&out.reports, None)
        }
        Command::Train(args) => {
            let out = train(&args.resolve()?)?;
            print!("{}", render_summary(&out.summary));
            Ok(())
        }
        Command::Benchmark {
            run,
            methods,
            match_budget,
            layer_speed,
        } => {
            let cfg = run.resolve()?;
            let opts = BenchmarkOptions {
                methods: if methods.is_empty() { Method::ALL.to_vec() } else { methods },
                match_budget,
                layer_speed: layer_speed.then(SpeedSpec::default),
            };
            let report = benchmark(&cfg, &opts)?;
            print!("{}", render_benchmark(&report.rows));
            if let Some(s) = &report.layer_speed {
                println!(
                    "layer speed: sparse-by-dense {:.2} steps/s, regular {:.2} steps/s, ratio {:.2}",
                    s.sd_steps_per_sec, s.reg_steps_per_sec, s.ratio
                );
            }
            Ok(())
        }
        Command::Ablate { run, fractions } => {
            let rows = ablate_sparsity(&run.resolve()?, &fractions)?;
            println!("{:>10} {:>8} {:>10}", "rho", "kept", "accuracy");
            for r in rows {
                println!("{:>10} {:>8} {:>10.4}", r.rho, r.kept_per_layer, r.best_valid_accuracy);
            }
            Ok(())
        }
        Command::Convert { checkpoint, basis, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let bases = basis.as_deref().map(BasisSet::load_dir).transpose()?;
            ck.to_plain(bases.as_ref())?.save(&out)
        }
        Command::Inspect {
            basis,
            coo,
            checkpoint,
            out,
        } => {
            let out = out.as_deref();
            if let Some(p) = basis {
                if p.is_dir() {
                    let set = BasisSet::load_dir(&p)?;
                    emit(&[inspect_basis(&set.up), inspect_basis(&set.down)], out)
                } else {
                    emit(&inspect_basis(&TransitionBasis::load(&p)?), out)
                }
            } else if let Some(p) = coo {
                emit(&inspect_coo(&SparseCoo::load(&p)?), out)
            } else if let Some(p) = checkpoint {
                emit(&inspect_checkpoint(&Checkpoint::load(&p)?), out)
            } else {
                Err(Error::Config("inspect needs one of --basis, --coo or --checkpoint".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
