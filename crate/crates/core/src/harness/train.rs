use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{loss_forward_backward, LinearLayer, LossKind, Role, Targets, ToyModel};
use crate::baselines::{trainable_param_count, LoraAdapter, LoraLayer, MePropLayer, ModelInventory};
use crate::calib::{hosvd_basis, record_calibration, sparsity_report, SparsityReport};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::sparsegrad::SparseGradLayer;

use super::data::epoch_order;
use super::net::{count_correct, Footprint, Net, Trainer};
use super::{generate_dataset, BasisSet, Checkpoint, Dataset, Method, RunConfig, TaskSpec};

const MODEL_SALT: u64 = 0x6d6f_6465_6c00_0001;
const LORA_SALT: u64 = 0x6c6f_7261_0000_0002;
const CALIB_SALT: u64 = 0x6361_6c69_6200_0003;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Valid,
}

/// One line of `metrics.jsonl`. `tracked_bytes` is the running peak of the
/// explicit footprint (weights, bases, cached activations, gradients,
/// optimizer state) since the start of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub tracked_bytes: usize,
}

/// One line of `timing.jsonl`, keyed like the metrics line it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: Phase,
    pub steps_per_sec: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub seed: u64,
    pub steps: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_valid_loss: f64,
    pub best_valid_accuracy: f64,
    pub final_train_loss: f64,
    /// Budgeted trainable MLP weights (top-k entries or adapter size).
    pub trainable_mlp_weights: u64,
    pub peak_tracked_bytes: usize,
    pub peak_trainable_state_bytes: usize,
    pub basis_bytes: usize,
    pub final_footprint: Footprint,
}

/// Wall-clock facts, kept apart from the reproducible payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub created_unix: u64,
    pub train_wall_ms: f64,
    pub steps_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceRecord {
    pub method: Method,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub last_finite_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    pub bases: BasisSet,
    pub reports: BTreeMap<String, SparsityReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub metrics: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    pub run_timing: RunTiming,
    /// Best-validation model with its optimizer state.
    pub checkpoint: Checkpoint,
    pub bases: Option<BasisSet>,
    pub calibration: Option<CalibrationOutcome>,
}

impl TrainOutcome {
    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics.iter().filter(|m| m.split == Phase::Train).map(|m| m.loss).collect()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub(crate) fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("plain data serializes");
        out.write_all(b"\n").expect("vec write");
    }
    String::from_utf8(out).expect("json is utf-8")
}

/// Model every run of `cfg` starts from: the configured checkpoint or a
/// seeded random initialization.
pub fn initial_model(cfg: &RunConfig) -> Result<ToyModel<LinearLayer>> {
    let Some(path) = &cfg.init_checkpoint else {
        return Ok(ToyModel::random(cfg.dims(), cfg.activation, cfg.seed ^ MODEL_SALT));
    };
    let ck = Checkpoint::load(path)?;
    let bases = match &cfg.basis {
        Some(dir) => Some(BasisSet::load_dir(dir)?),
        None => None,
    };
    let model = ck.plain_model(bases.as_ref())?;
    if model.dims() != cfg.dims() {
        return Err(Error::Config(format!(
            "checkpoint {} has dims {:?}, config asks for {:?}",
            path.display(),
            model.dims(),
            cfg.dims()
        )));
    }
    if model.activation != cfg.activation {
        return Err(Error::Config(format!(
            "checkpoint activation {} differs from config activation {}",
            model.activation, cfg.activation
        )));
    }
    Ok(model)
}

fn calibration_batches<'a>(data: &'a Dataset, cfg: &'a RunConfig) -> impl Iterator<Item = (Matrix, Targets)> + 'a {
    let n = data.train.len();
    (0u64..).flat_map(move |epoch| {
        let order = epoch_order(n, cfg.seed ^ CALIB_SALT, epoch);
        order
            .chunks(cfg.batch_size)
            .map(|c| {
                let (x, y) = data.train.batch(c);
                (x, Targets::Classes(y))
            })
            .collect::<Vec<_>>()
    })
}

fn calibrate_on(cfg: &RunConfig, data: &Dataset, model: &ToyModel<LinearLayer>) -> Result<CalibrationOutcome> {
    let mut probe = model.clone();
    let mut logs = record_calibration(&mut probe, calibration_batches(data, cfg), cfg.calibration_steps)?;
    let mut basis = |role: Role| {
        let log = logs.get_mut(&role).expect("one log per role");
        log.seed = cfg.seed;
        hosvd_basis(log)
    };
    let bases = BasisSet::new(basis(Role::Up)?, basis(Role::Down)?)?;
    let mut reports = BTreeMap::new();
    for role in Role::ALL {
        let report = sparsity_report(&logs[&role], bases.get(role), cfg.rho.clamp(f64::MIN_POSITIVE, 1.0))?;
        reports.insert(role.name().to_string(), report);
    }
    Ok(CalibrationOutcome { bases, reports })
}

/// Observation-only run on the configured task and initial model, then one
/// HOSVD basis per role. Writes `up.sgba`, `down.sgba` and
/// `sparsity_report.json` into `cfg.out` when set.
pub fn calibrate(cfg: &RunConfig) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&TaskSpec::from_config(cfg))?;
    let model = initial_model(cfg)?;
    let out = calibrate_on(cfg, &data, &model)?;
    if let Some(dir) = &cfg.out {
        write_calibration(&out, dir)?;
    }
    Ok(out)
}

pub fn write_calibration(out: &CalibrationOutcome, dir: &Path) -> Result<()> {
    out.bases.save_dir(dir)?;
    write_file(&dir.join("sparsity_report.json"), to_json(&out.reports))
}

fn resolve_bases(
    cfg: &RunConfig,
    data: &Dataset,
    model: &ToyModel<LinearLayer>,
) -> Result<(BasisSet, Option<CalibrationOutcome>)> {
    if cfg.identity_basis {
        return Ok((BasisSet::identity(&cfg.dims()), None));
    }
    if cfg.calibrate {
        let cal = calibrate_on(cfg, data, model)?;
        if let Some(out) = &cfg.out {
            write_calibration(&cal, &out.join("basis"))?;
        }
        return Ok((cal.bases.clone(), Some(cal)));
    }
    match &cfg.basis {
        Some(dir) => {
            let bases = BasisSet::load_dir(dir)?;
            bases.check_dims(&cfg.dims())?;
            Ok((bases, None))
        }
        None => Err(Error::Config(format!(
            "method {} needs a transition basis: pass --basis <dir> (from `sparsegrad calibrate`) or --calibrate",
            cfg.method
        ))),
    }
}

fn build_net(cfg: &RunConfig, model: ToyModel<LinearLayer>, bases: Option<&BasisSet>) -> Result<Net> {
    let adam = cfg.adam();
    let flags = cfg.masked_flags();
    Ok(match cfg.method {
        Method::Regular => Net::Regular(Trainer::new(model, adam, flags)),
        Method::SparsegradSd | Method::SparsegradReg => {
            let bases = bases.expect("bases resolved for sparsegrad");
            let policy = cfg.policy();
            let m = model.try_map_layers(|_, role, l| SparseGradLayer::convert(&l, bases.get(role).clone(), policy))?;
            Net::SparseGrad(Trainer::new(m, adam, flags))
        }
        Method::Meprop => {
            let m = model.try_map_layers(|_, _, l| MePropLayer::new(l, cfg.rho))?;
            Net::Meprop(Trainer::new(m, adam, flags))
        }
        Method::Lora => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LORA_SALT);
            let alpha = cfg.lora_alpha();
            let m = model.try_map_layers(|_, _, l| {
                let mut adapter = LoraAdapter::new(l.w_t.rows(), l.w_t.cols(), cfg.rank, &mut rng)?;
                adapter.alpha = alpha;
                LoraLayer::new(l, adapter)
            })?;
            Net::Lora(Trainer::new(m, adam, flags))
        }
    })
}

fn evaluate(net: &Net, x: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = net.infer(x)?;
    let (loss, _) = loss_forward_backward(LossKind::SoftmaxCrossEntropy, &logits, &Targets::Classes(labels.to_vec()))?;
    Ok((loss, count_correct(&logits, labels) as f64 / labels.len() as f64))
}

/// Calibrate if asked, convert the MLP layers for the method, then train
/// with per-epoch validation and early stopping on validation loss. The
/// returned checkpoint holds the best-validation model.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&TaskSpec::from_config(cfg))?;
    let model = initial_model(cfg)?;
    train_with(cfg, &data, model, None)
}

/// Bases shared by several runs on the same data and initial model.
pub(crate) fn shared_bases(cfg: &RunConfig, data: &Dataset, model: &ToyModel<LinearLayer>) -> Result<BasisSet> {
    let probe = RunConfig {
        out: None,
        ..cfg.clone()
    };
    let (bases, cal) = resolve_bases(&probe, data, model)?;
    if let (Some(cal), Some(out)) = (cal, &cfg.out) {
        write_calibration(&cal, &out.join("basis"))?;
    }
    Ok(bases)
}

pub(crate) fn train_with(
    cfg: &RunConfig,
    data: &Dataset,
    model: ToyModel<LinearLayer>,
    prepared: Option<&BasisSet>,
) -> Result<TrainOutcome> {
    if let Some(out) = &cfg.out {
        write_file(&out.join("config.toml"), cfg.to_toml_string())?;
    }
    let (bases, calibration) = match (cfg.method.is_sparsegrad(), prepared) {
        (false, _) => (None, None),
        (true, Some(b)) => (Some(b.clone()), None),
        (true, None) => {
            let (b, c) = resolve_bases(cfg, data, &model)?;
            (Some(b), c)
        }
    };
    let basis_bytes = bases.as_ref().map_or(0, BasisSet::stored_bytes);
    let mut net = build_net(cfg, model, bases.as_ref())?;

    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    let mut step = 0u64;
    let mut peak = 0usize;
    let mut peak_state = 0usize;
    let mut last_train_loss = f64::NAN;
    let mut best: Option<(f64, f64, usize, Net)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    let mut train_secs = 0.0;
    let n = data.train.len();

    'epochs: for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut capped = false;
        for chunk in epoch_order(n, cfg.seed, epoch as u64).chunks(cfg.batch_size) {
            let (x, labels) = data.train.batch(chunk);
            let t0 = Instant::now();
            let out = net.step(&x, &labels)?;
            let dt = t0.elapsed().as_secs_f64();
            train_secs += dt;
            step += 1;
            if !out.loss.is_finite() {
                let record = DivergenceRecord {
                    method: cfg.method,
                    seed: cfg.seed,
                    step,
                    epoch,
                    loss: out.loss,
                    last_finite_loss: last_train_loss.is_finite().then_some(last_train_loss),
                };
                if let Some(dir) = &cfg.out {
                    write_file(&dir.join("metrics.jsonl"), to_jsonl(&metrics))?;
                    write_file(&dir.join("diverged.json"), to_json(&record))?;
                }
                return Err(Error::Diverged { step, loss: out.loss });
            }
            last_train_loss = out.loss;
            let fp = net.footprint(chunk.len());
            peak = peak.max(fp.total() + out.gradient_bytes + basis_bytes);
            peak_state = peak_state.max(fp.trainable_state() + out.gradient_bytes);
            metrics.push(MetricsRecord {
                step,
                epoch,
                split: Phase::Train,
                loss: out.loss,
                accuracy: out.correct as f64 / chunk.len() as f64,
                tracked_bytes: peak,
            });
            timing.push(TimingRecord {
                step,
                epoch,
                split: Phase::Train,
                steps_per_sec: 1.0 / dt.max(f64::MIN_POSITIVE),
                wall_ms: train_secs * 1e3,
            });
            if cfg.max_steps.is_some_and(|m| step >= m) {
                capped = true;
                break;
            }
        }

        let (loss, accuracy) = evaluate(&net, &data.valid.x, &data.valid.labels)?;
        metrics.push(MetricsRecord {
            step,
            epoch,
            split: Phase::Valid,
            loss,
            accuracy,
            tracked_bytes: peak,
        });
        timing.push(TimingRecord {
            step,
            epoch,
            split: Phase::Valid,
            steps_per_sec: step as f64 / train_secs.max(f64::MIN_POSITIVE),
            wall_ms: train_secs * 1e3,
        });
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, accuracy, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break 'epochs;
            }
        }
        if capped {
            break;
        }
    }

    let (best_valid_loss, best_valid_accuracy, best_epoch, best_net) = best.expect("at least one epoch runs");
    let mut final_footprint = best_net.footprint(cfg.batch_size);
    final_footprint.frozen_weights += basis_bytes;
    let summary = TrainSummary {
        method: cfg.method,
        seed: cfg.seed,
        steps: step,
        epochs_run,
        best_epoch,
        stopped_early,
        best_valid_loss,
        best_valid_accuracy,
        final_train_loss: last_train_loss,
        trainable_mlp_weights: trainable_param_count(cfg.method, cfg.rho, cfg.rank, &ModelInventory::toy(&cfg.dims()))
            .trainable_weights,
        peak_tracked_bytes: peak,
        peak_trainable_state_bytes: peak_state,
        basis_bytes,
        final_footprint,
    };
    let run_timing = RunTiming {
        created_unix: unix_now(),
        train_wall_ms: train_secs * 1e3,
        steps_per_sec: step as f64 / train_secs.max(f64::MIN_POSITIVE),
    };
    let outcome = TrainOutcome {
        summary,
        metrics,
        timing,
        run_timing,
        checkpoint: best_net.checkpoint(cfg.method, true),
        bases,
        calibration,
    };
    if let Some(dir) = &cfg.out {
        write_outcome(&outcome, dir)?;
    }
    Ok(outcome)
}

/// `metrics.jsonl`, `summary.json` and `summary.txt` are reproducible for
/// a fixed config; `timing.jsonl` and `timing.json` hold wall-clock data.
pub fn write_outcome(o: &TrainOutcome, dir: &Path) -> Result<()> {
    write_file(&dir.join("metrics.jsonl"), to_jsonl(&o.metrics))?;
    write_file(&dir.join("summary.json"), to_json(&o.summary))?;
    write_file(&dir.join("summary.txt"), render_summary(&o.summary))?;
    write_file(&dir.join("timing.jsonl"), to_jsonl(&o.timing))?;
    write_file(&dir.join("timing.json"), to_json(&o.run_timing))?;
    o.checkpoint.save(&dir.join("checkpoint.sgck"))
}

pub fn render_summary(s: &TrainSummary) -> String {
    let rows: Vec<(&str, String)> = vec![
        ("method", s.method.to_string()),
        ("seed", s.seed.to_string()),
        ("steps", s.steps.to_string()),
        ("epochs run", s.epochs_run.to_string()),
        ("best epoch", s.best_epoch.to_string()),
        ("stopped early", s.stopped_early.to_string()),
        ("best valid loss", format!("{:.6}", s.best_valid_loss)),
        ("best valid accuracy", format!("{:.4}", s.best_valid_accuracy)),
        ("final train loss", format!("{:.6}", s.final_train_loss)),
        ("trainable mlp weights", s.trainable_mlp_weights.to_string()),
        ("peak tracked bytes", s.peak_tracked_bytes.to_string()),
        ("peak trainable-state bytes", s.peak_trainable_state_bytes.to_string()),
        ("basis bytes", s.basis_bytes.to_string()),
        ("optimizer bytes", s.final_footprint.optimizer.to_string()),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> RunConfig {
        RunConfig {
            method,
            train_samples: 256,
            valid_samples: 64,
            d: 8,
            input_dim: 8,
            h: 16,
            n_blocks: 2,
            epochs: 3,
            rho: 0.1,
            calibration_steps: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn every_method_trains() {
        for method in Method::ALL {
            let mut cfg = small(method);
            cfg.calibrate = method.is_sparsegrad();
            let out = train(&cfg).unwrap();
            assert_eq!(out.summary.steps, 3 * 8);
            assert!(out.summary.best_valid_accuracy > 0.25, "{method}: {:?}", out.summary);
            assert_eq!(out.checkpoint.method, method);
        }
    }

    #[test]
    fn sparsegrad_without_basis_is_instructive() {
        let err = train(&small(Method::SparsegradSd)).unwrap_err().to_string();
        assert!(err.contains("--basis") && err.contains("--calibrate"), "{err}");
    }

    #[test]
    fn max_steps_caps_and_still_validates() {
        let cfg = RunConfig {
            max_steps: Some(5),
            ..small(Method::Regular)
        };
        let out = train(&cfg).unwrap();
        assert_eq!(out.summary.steps, 5);
        assert_eq!(out.metrics.last().unwrap().split, Phase::Valid);
    }

    #[test]
    fn outputs_are_written_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let cfg = RunConfig {
                out: Some(dir.path().join(sub)),
                ..small(Method::Meprop)
            };
            train(&cfg).unwrap();
            fs::read(dir.path().join(sub).join("metrics.jsonl")).unwrap()
        };
        assert_eq!(run("a"), run("b"));
        for f in ["summary.json", "summary.txt", "timing.jsonl", "timing.json", "checkpoint.sgck", "config.toml"] {
            assert!(dir.path().join("a").join(f).exists(), "{f}");
        }
    }

    #[test]
    fn divergence_writes_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            lr: 1e300,
            out: Some(dir.path().to_path_buf()),
            ..small(Method::Regular)
        };
        match train(&cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(dir.path().join("diverged.json").exists());
    }
}
