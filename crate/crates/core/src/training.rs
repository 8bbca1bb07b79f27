//! ADAM with cosine annealing and global-norm clipping, and the training loop.
//!
//! Step `k` (0-based) trains on pair `k` of the dataset, i.e. stream `k` of the data
//! seed, so a run is fully determined by its config and can resume from any checkpoint
//! that carries the optimizer state.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datagen::{Dataset, MisalignmentSpec, NoiseSpec, PhantomSpec, TrainingPair};
use crate::diffnet::{
    loss_forward_backward, loss_value, save_checkpoint, Checkpoint, LossSpec, NetConfig,
    OptimizerSnapshot, PreparedLoss, PrimalDualNet,
};
use crate::error::{Error, Result};

/// First stream of the held-out validation pairs.
pub const VALIDATION_STREAM: u64 = 1 << 62;

pub const LOG_HEADER: &str = "step,loss,grad_norm,lr,mass_err,skipped";
pub const VALIDATION_HEADER: &str = "step,loss,mass_err";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// `β₁ = 0.9`, `β₂ = 0.99`, `ε = 10⁻⁸`.
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }

    pub fn snapshot(&self, step: u64) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step,
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(snapshot: &OptimizerSnapshot) -> Self {
        Self {
            m: snapshot.m.clone(),
            v: snapshot.v.clone(),
            t: snapshot.t,
            ..Self::new(0)
        }
    }
}

/// One bias-corrected ADAM update. Moments are stored in f32; the arithmetic is f64.
pub fn adam_step(state: &mut AdamState, params: &mut [f32], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "ADAM shapes differ: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        let m = b1 * state.m[k] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[k] as f64 + (1.0 - b2) * g * g;
        state.m[k] = m as f32;
        state.v[k] = v as f32;
        let step = lr * (m / c1) / ((v / c2).sqrt() + state.epsilon);
        params[k] = (params[k] as f64 - step) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub total: u64,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn new(initial: f64, total: u64) -> Self {
        Self {
            initial,
            total,
            floor: 0.0,
        }
    }

    /// `η(t) = η_min + ½(η₀ − η_min)(1 + cos(πt/T))`, held at `η_min` past `T`.
    pub fn rate(&self, t: u64) -> f64 {
        if self.total == 0 || t >= self.total {
            return if self.total == 0 { self.initial } else { self.floor };
        }
        let phase = std::f64::consts::PI * t as f64 / self.total as f64;
        self.floor + 0.5 * (self.initial - self.floor) * (1.0 + phase.cos())
    }
}

/// Scale all gradients by `max_norm / ‖g‖` when `‖g‖ > max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Precondition(format!("clip norm must be positive, got {max_norm}")));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::breakdown(
            "gradient clipping",
            format!("gradient of parameter {k} is {}", grads[k]),
        ));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub misalignment: MisalignmentSpec,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub data: DataConfig,
    pub loss: LossSpec,
    pub steps: u64,
    pub schedule: CosineSchedule,
    pub clip_norm: f64,
    /// Seeds the weight initialization.
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Evaluate the validation set every this many steps; 0 only at start and end.
    pub validate_every: u64,
    pub validation_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.data.phantom.validate()?;
        if !(self.clip_norm > 0.0) {
            return Err(Error::Precondition("clip norm must be positive".into()));
        }
        if !(self.schedule.initial >= self.schedule.floor && self.schedule.floor >= 0.0) {
            return Err(Error::Precondition("learning rate must be nonnegative and decaying".into()));
        }
        if self.data.phantom.grid != self.net.grid {
            return Err(Error::Contract("phantom grid differs from network grid".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(
            self.data.seed,
            self.data.phantom.clone(),
            self.data.misalignment,
            self.data.noise,
            self.net.geometry,
        )
    }
}

/// The held-out pairs: streams `VALIDATION_STREAM + k` of the data seed.
pub fn validation_set(dataset: &Dataset, size: usize) -> Result<Vec<TrainingPair>> {
    (0..size as u64)
        .map(|k| dataset.pair(VALIDATION_STREAM + k))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub mass_err: f64,
    pub skipped: bool,
}

impl LogRow {
    /// CSV record; skipped steps leave the numeric fields empty.
    pub fn csv(&self) -> String {
        if self.skipped {
            format!("{},,,{},,1", self.step, self.lr)
        } else {
            format!(
                "{},{},{},{},{},0",
                self.step, self.loss, self.grad_norm, self.lr, self.mass_err
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub step: u64,
    pub loss: f64,
    pub mass_err: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PrimalDualNet<f32>,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValidationRow>,
    pub skipped: u64,
}

/// Mean loss and mean absolute mass error over `pairs`, without gradients.
pub fn evaluate_set(
    net: &PrimalDualNet<f32>,
    pairs: &[TrainingPair],
    loss: &PreparedLoss,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut total = 0.0;
    let mut mass = 0.0;
    for p in pairs {
        let l = loss_value(net, p, loss)?;
        total += l.loss;
        mass += l.mass_error.abs();
    }
    Ok((total / pairs.len() as f64, mass / pairs.len() as f64))
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn validation(&self) -> PathBuf {
        self.dir.join("validation.csv")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.otpd")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.otpd"))
    }
}

fn append_lines(path: &Path, header: &str, lines: &[String], fresh: bool) -> Result<()> {
    let mut f = if fresh || !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(path)?
    };
    let mut buf = String::new();
    for l in lines {
        writeln!(buf, "{l}").expect("string write");
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Train from the seeded initialization, or continue `resume` (which must carry its
/// optimizer state). With `out`, logs stream to CSV and checkpoints are written.
pub fn train(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.dataset()?;
    let loss = PreparedLoss::new(config.loss.clone(), config.net.grid)?;
    let validation = validation_set(&dataset, config.validation_size)?;

    let (mut net, mut adam, start) = match resume {
        None => {
            let net = PrimalDualNet::<f32>::initialized(config.net, config.seed)?;
            let adam = AdamState::new(net.params().len());
            (net, adam, 0)
        }
        Some(cp) => {
            if cp.net.config() != &config.net {
                return Err(Error::Contract(
                    "checkpoint network does not match the training config".into(),
                ));
            }
            let snap = cp.optimizer.ok_or_else(|| {
                Error::Contract("checkpoint has no optimizer state to resume from".into())
            })?;
            if snap.m.len() != cp.net.params().len() {
                return Err(Error::Contract("optimizer state size mismatch".into()));
            }
            let adam = AdamState::restore(&snap);
            (cp.net, adam, snap.step)
        }
    };
    if start > config.steps {
        return Err(Error::Contract(format!(
            "checkpoint is at step {start}, past the configured {} steps",
            config.steps
        )));
    }

    let fresh = start == 0;
    let mut log = Vec::new();
    let mut vlog = Vec::new();
    let mut pending = Vec::new();
    let mut vpending = Vec::new();
    let allowed_skips = config.steps / 100;
    let mut skipped = 0u64;

    let validate = |net: &PrimalDualNet<f32>, step: u64| -> Result<ValidationRow> {
        let (l, m) = evaluate_set(net, &validation, &loss)?;
        Ok(ValidationRow {
            step,
            loss: l,
            mass_err: m,
        })
    };
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
        if fresh {
            append_lines(&o.metrics(), LOG_HEADER, &[], true)?;
            append_lines(&o.validation(), VALIDATION_HEADER, &[], true)?;
        }
    }
    if fresh && config.validation_size > 0 {
        let row = validate(&net, 0)?;
        vpending.push(format!("{},{},{}", row.step, row.loss, row.mass_err));
        vlog.push(row);
    }

    for k in start..config.steps {
        let step = k + 1;
        let lr = config.schedule.rate(k);
        let pair = dataset.pair(k)?;
        let row = match loss_forward_backward(&net, &pair, &loss) {
            Ok(lg) => {
                let mut g: Vec<f64> = lg.grad.iter().map(|&v| v as f64).collect();
                let norm = clip_global_norm(&mut g, config.clip_norm)?;
                adam_step(&mut adam, net.params_mut(), &g, lr)?;
                LogRow {
                    step,
                    loss: lg.loss,
                    grad_norm: norm,
                    lr,
                    mass_err: lg.mass_error,
                    skipped: false,
                }
            }
            Err(Error::Degenerate(msg)) => {
                skipped += 1;
                if skipped > allowed_skips {
                    return Err(Error::Degenerate(format!(
                        "{skipped} degenerate steps by step {step} exceed 1% of {} (last: {msg})",
                        config.steps
                    )));
                }
                LogRow {
                    step,
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    lr,
                    mass_err: f64::NAN,
                    skipped: true,
                }
            }
            Err(e) => return Err(e),
        };
        pending.push(row.csv());
        log.push(row);

        let last = step == config.steps;
        if config.validation_size > 0
            && (last || (config.validate_every > 0 && step % config.validate_every == 0))
        {
            let row = validate(&net, step)?;
            vpending.push(format!("{},{},{}", row.step, row.loss, row.mass_err));
            vlog.push(row);
        }
        if let Some(o) = out {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save_checkpoint(&o.checkpoint(step), &net, Some(&adam.snapshot(step)))?;
            }
            if last || pending.len() >= 100 {
                append_lines(&o.metrics(), LOG_HEADER, &pending, false)?;
                append_lines(&o.validation(), VALIDATION_HEADER, &vpending, false)?;
                pending.clear();
                vpending.clear();
            }
        }
    }
    if let Some(o) = out {
        append_lines(&o.metrics(), LOG_HEADER, &pending, false)?;
        append_lines(&o.validation(), VALIDATION_HEADER, &vpending, false)?;
        save_checkpoint(&o.final_checkpoint(), &net, Some(&adam.snapshot(config.steps)))?;
    }
    Ok(TrainOutcome {
        net,
        adam,
        log,
        validation: vlog,
        skipped,
    })
}
