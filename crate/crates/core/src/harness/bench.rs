use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::top_k_count;

use super::checkpoint::OptState;
use super::train::{shared_bases, to_json, to_jsonl, train_with, write_file, TrainOutcome};
use super::{generate_dataset, initial_model, layer_speed_benchmark, Method, RunConfig, SpeedReport, SpeedSpec, TaskSpec};

/// Top-k fraction whose per-layer budget equals a rank-`rank` adapter on a
/// `d × h` layer.
pub fn matched_fraction(rank: usize, d: usize, h: usize) -> f64 {
    (rank * (d + h)) as f64 / (d * h) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOptions {
    pub methods: Vec<Method>,
    /// Give the top-k methods the LoRA adapter's parameter budget.
    pub match_budget: bool,
    /// Also time the two converted-layer backward paths on a single layer.
    pub layer_speed: Option<SpeedSpec>,
}

/// Reproducible part of one benchmark line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub rho: f64,
    pub rank: usize,
    pub trainable_mlp_weights: u64,
    pub steps: u64,
    pub best_valid_accuracy: f64,
    pub best_valid_loss: f64,
    pub peak_tracked_bytes: usize,
    pub peak_trainable_state_bytes: usize,
    /// Optimizer state held for the MLP weights (or adapters) at the end.
    pub mlp_optimizer_bytes: usize,
    /// Dense Adam moments for the same MLP weights.
    pub dense_mlp_moment_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkTiming {
    pub method: Method,
    pub steps_per_sec: f64,
    pub train_wall_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub timing: Vec<BenchmarkTiming>,
    pub layer_speed: Option<SpeedReport>,
}

fn mlp_optimizer_bytes(o: &TrainOutcome) -> usize {
    let Some(opt) = &o.checkpoint.optimizer else {
        return 0;
    };
    let n_mlp = 2 * o.checkpoint.blocks.len();
    let lora = o.summary.method == Method::Lora;
    opt.states[..2 * n_mlp]
        .iter()
        .enumerate()
        .filter(|(i, _)| lora || i % 2 == 0)
        .map(|(_, s)| match s {
            OptState::Dense(a) => a.moment_bytes(),
            OptState::Masked(m) => m.state_bytes(),
        })
        .sum()
}

/// One training run per method on shared data, initial model and bases.
pub fn benchmark(cfg: &RunConfig, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    if opts.methods.len() < 2 {
        return Err(Error::Config(format!(
            "benchmark needs at least two methods, got {}",
            opts.methods.len()
        )));
    }
    let base = RunConfig {
        rho: if opts.match_budget {
            matched_fraction(cfg.rank, cfg.d, cfg.h)
        } else {
            cfg.rho
        },
        ..cfg.clone()
    };
    let configs: Vec<RunConfig> = opts
        .methods
        .iter()
        .map(|&method| RunConfig {
            method,
            out: cfg.out.as_ref().map(|o| o.join(method.name())),
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let data = generate_dataset(&TaskSpec::from_config(&base))?;
    let model = initial_model(&base)?;
    let bases = if opts.methods.iter().any(|m| m.is_sparsegrad()) {
        let probe = RunConfig {
            method: Method::SparsegradSd,
            ..base.clone()
        };
        Some(shared_bases(&probe, &data, &model)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for c in &configs {
        let o = train_with(c, &data, model.clone(), bases.as_ref())?;
        rows.push(BenchmarkRow {
            method: c.method,
            rho: c.rho,
            rank: c.rank,
            trainable_mlp_weights: o.summary.trainable_mlp_weights,
            steps: o.summary.steps,
            best_valid_accuracy: o.summary.best_valid_accuracy,
            best_valid_loss: o.summary.best_valid_loss,
            peak_tracked_bytes: o.summary.peak_tracked_bytes,
            peak_trainable_state_bytes: o.summary.peak_trainable_state_bytes,
            mlp_optimizer_bytes: mlp_optimizer_bytes(&o),
            dense_mlp_moment_bytes: 2 * c.n_blocks * 2 * c.d * c.h * 8,
        });
        timing.push(BenchmarkTiming {
            method: c.method,
            steps_per_sec: o.run_timing.steps_per_sec,
            train_wall_ms: o.run_timing.train_wall_ms,
        });
    }
    let layer_speed = opts.layer_speed.as_ref().map(layer_speed_benchmark).transpose()?;
    let report = BenchmarkReport {
        rows,
        timing,
        layer_speed,
    };
    if let Some(dir) = &cfg.out {
        write_benchmark(&report, dir)?;
    }
    Ok(report)
}

/// `benchmark.jsonl` and `benchmark.txt` are reproducible;
/// `benchmark_timing.json` holds speeds.
pub fn write_benchmark(r: &BenchmarkReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("benchmark.jsonl"), to_jsonl(&r.rows))?;
    write_file(&dir.join("benchmark.txt"), render_benchmark(&r.rows))?;
    #[derive(Serialize)]
    struct Timing<'a> {
        runs: &'a [BenchmarkTiming],
        layer_speed: &'a Option<SpeedReport>,
    }
    write_file(
        &dir.join("benchmark_timing.json"),
        to_json(&Timing {
            runs: &r.timing,
            layer_speed: &r.layer_speed,
        }),
    )
}

pub fn render_benchmark(rows: &[BenchmarkRow]) -> String {
    let mut s = format!(
        "{:<15} {:>8} {:>5} {:>9} {:>8} {:>13} {:>13} {:>11}\n",
        "method", "rho", "rank", "trainable", "accuracy", "tracked_bytes", "state_bytes", "optim_bytes"
    );
    for r in rows {
        s += &format!(
            "{:<15} {:>8.5} {:>5} {:>9} {:>8.4} {:>13} {:>13} {:>11}\n",
            r.method.name(),
            r.rho,
            r.rank,
            r.trainable_mlp_weights,
            r.best_valid_accuracy,
            r.peak_tracked_bytes,
            r.peak_trainable_state_bytes,
            r.mlp_optimizer_bytes
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub rho: f64,
    pub kept_per_layer: usize,
    pub steps: u64,
    pub best_valid_accuracy: f64,
    pub best_valid_loss: f64,
}

/// One training run per fraction with shared seed, data, initial model and
/// bases. Only the top-k methods take a fraction.
pub fn ablate_sparsity(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<AblationRow>> {
    if !matches!(cfg.method, Method::SparsegradSd | Method::SparsegradReg | Method::Meprop) {
        return Err(Error::Config(format!(
            "ablation sweeps the top-k fraction; method {} has none",
            cfg.method
        )));
    }
    if fractions.is_empty() {
        return Err(Error::Config("ablation needs at least one fraction".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fractions must lie in (0, 1], got {f}")));
    }
    let configs: Vec<RunConfig> = fractions
        .iter()
        .map(|&rho| RunConfig {
            rho,
            out: cfg.out.as_ref().map(|o| o.join(format!("rho-{rho}"))),
            ..cfg.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let data = generate_dataset(&TaskSpec::from_config(cfg))?;
    let model = initial_model(cfg)?;
    let bases = if cfg.method.is_sparsegrad() {
        Some(shared_bases(cfg, &data, &model)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for c in &configs {
        let o = train_with(c, &data, model.clone(), bases.as_ref())?;
        rows.push(AblationRow {
            rho: c.rho,
            kept_per_layer: top_k_count(c.rho, c.d * c.h),
            steps: o.summary.steps,
            best_valid_accuracy: o.summary.best_valid_accuracy,
            best_valid_loss: o.summary.best_valid_loss,
        });
    }
    if let Some(dir) = &cfg.out {
        write_file(&dir.join("ablation.jsonl"), to_jsonl(&rows))?;
        let mut csv = String::from("rho,kept_per_layer,steps,best_valid_accuracy,best_valid_loss\n");
        for r in &rows {
            csv += &format!(
                "{},{},{},{},{}\n",
                r.rho, r.kept_per_layer, r.steps, r.best_valid_accuracy, r.best_valid_loss
            );
        }
        write_file(&dir.join("ablation.csv"), csv)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            train_samples: 256,
            valid_samples: 64,
            d: 8,
            input_dim: 8,
            h: 16,
            n_blocks: 1,
            epochs: 2,
            rho: 0.1,
            calibrate: true,
            calibration_steps: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn single_method_is_a_config_error() {
        let opts = BenchmarkOptions {
            methods: vec![Method::Regular],
            match_budget: false,
            layer_speed: None,
        };
        assert!(matches!(benchmark(&small(), &opts), Err(Error::Config(_))));
    }

    #[test]
    fn matched_budget_equals_adapter_size() {
        let f = matched_fraction(1, 32, 128);
        assert_eq!(top_k_count(f, 32 * 128), 32 + 128);
    }

    #[test]
    fn benchmark_rows_follow_methods() {
        let opts = BenchmarkOptions {
            methods: Method::ALL.to_vec(),
            match_budget: true,
            layer_speed: None,
        };
        let r = benchmark(&small(), &opts).unwrap();
        assert_eq!(r.rows.len(), Method::ALL.len());
        let lora = r.rows.iter().find(|r| r.method == Method::Lora).unwrap();
        for row in &r.rows {
            if row.method != Method::Regular {
                assert_eq!(row.trainable_mlp_weights, lora.trainable_mlp_weights, "{row:?}");
            }
        }
    }

    #[test]
    fn ablation_has_one_row_per_fraction() {
        let cfg = RunConfig {
            method: Method::SparsegradSd,
            ..small()
        };
        let rows = ablate_sparsity(&cfg, &[0.05, 0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(ablate_sparsity(&cfg, &[0.0]).is_err());
        let lora = RunConfig {
            method: Method::Lora,
            ..small()
        };
        assert!(ablate_sparsity(&lora, &[0.1]).is_err());
    }
}
