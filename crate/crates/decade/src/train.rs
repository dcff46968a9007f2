//! Two-phase diffusion training.
//!
//! Phase A fits the unconditional noise predictor on pseudo-clean static
//! volumes; Phase B fits the control branch on condition stacks built from
//! noisy frames while the base stays frozen. Both phases minimize
//! E ||eps - eps_hat(x_t, t[, c])||^2 with t uniform over the schedule and
//! eps standard normal, under Adam with a cosine learning-rate decay.
//!
//! Checkpoints are written at a fixed cadence and at the end of the budget;
//! a non-finite loss aborts without touching the last cadence checkpoint.
//! Resume continues the step counter from the loaded manifest but rebuilds
//! the optimizer from scratch (only parameters persist in a checkpoint).

use crate::diffusion::{build_condition, q_sample, DiffusionSchedule, NormScale};
use crate::error::{DecadeError, Result};
use crate::nn::checkpoint::{save_checkpoint, CheckpointManifest};
use crate::nn::{BaseModel, ConditionalModel, Feat, Grads, ParamId, ParamStore};
use crate::phantom::{mean_static, STATIC_WINDOW_S};
use crate::seed::{derive_seed, stream_rng};
use crate::study::DynamicStudy;
use crate::vol::Volume;
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one training phase.
///
/// The desk defaults live in [`TrainingConfig::phase_a_desk`] and
/// [`TrainingConfig::phase_b_desk`]; the full-scale settings from the
/// protocol (300k and 100k steps) remain expressible through the same
/// fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total step budget; resume trains from the checkpoint step up to this.
    pub total_steps: u64,
    /// Optional parameter EMA decay; the shadow is saved next to the final
    /// checkpoint with an `-ema` suffix.
    pub ema_decay: Option<f64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::phase_a_desk()
    }
}

impl TrainingConfig {
    /// Desk-scale Phase A: base-model pre-training on static volumes.
    /// The step budget keeps both phases combined under an hour of
    /// single-core wall time at 24^3.
    pub fn phase_a_desk() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            total_steps: 12_000,
            ema_decay: None,
            checkpoint_every: 1_000,
            log_every: 50,
            seed: 0,
        }
    }

    /// Desk-scale Phase B: control-branch fine-tuning at a lower rate.
    pub fn phase_b_desk() -> Self {
        TrainingConfig {
            learning_rate: 5e-5,
            total_steps: 5_000,
            ..TrainingConfig::phase_a_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(DecadeError::validation(format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(DecadeError::validation("batch_size must be >= 1"));
        }
        if self.total_steps < 1 {
            return Err(DecadeError::validation("total_steps must be >= 1"));
        }
        if self.checkpoint_every < 1 || self.log_every < 1 {
            return Err(DecadeError::validation("cadences must be >= 1"));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(DecadeError::validation(format!(
                    "ema_decay {d} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero across the budget; `step` counts
/// completed steps, so the first update runs at the full rate.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    assert!(total > 0, "step budget must be positive");
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction; moment buffers share the gradient layout.
pub struct Adam {
    m: Grads,
    v: Grads,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam { m: Grads::zeros_like(store), v: Grads::zeros_like(store), t: 0 }
    }

    /// Applies one update; `grads` must match the store layout.
    ///
    /// Both bias corrections fold into the step size, so per scalar the
    /// update is `lr * sqrt(bc2)/bc1 * m / (sqrt(v) + eps * sqrt(bc2))`,
    /// algebraically identical to the textbook m-hat/v-hat form.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let scale = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (ADAM_EPS * bc2.sqrt()) as f32;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        for i in 0..store.len() {
            let id = ParamId(i);
            let ms = self.m.get_mut(id);
            let gs = grads.get(id);
            let ps = store.data_mut(id);
            for j in 0..ps.len() {
                let g = gs[j];
                ms[j] = b1 * ms[j] + (1.0 - b1) * g;
            }
            let vs = self.v.get_mut(id);
            for j in 0..ps.len() {
                let g = gs[j];
                vs[j] = b2 * vs[j] + (1.0 - b2) * g * g;
                ps[j] -= scale * ms[j] / (vs[j].sqrt() + eps);
            }
        }
    }
}

/// Pseudo-clean pre-training volumes: one normalized static-window mean per
/// study.
pub struct PhaseASet {
    pub volumes: Vec<Volume>,
}

impl PhaseASet {
    /// Normalizes each study by its own intensity scale, then reduces it to
    /// the duration-weighted static-window mean.
    pub fn from_studies(studies: &[DynamicStudy]) -> Result<Self> {
        if studies.is_empty() {
            return Err(DecadeError::validation("phase A needs at least one study"));
        }
        let mut volumes = Vec::with_capacity(studies.len());
        for s in studies {
            let norm = NormScale::fit(s)?.normalize_study(s);
            volumes.push(mean_static(&norm, STATIC_WINDOW_S.0, STATIC_WINDOW_S.1)?);
        }
        Ok(PhaseASet { volumes })
    }

    /// Uniform with-replacement draw of `n` volumes.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<ArrayView3<'_, f32>> {
        (0..n)
            .map(|_| self.volumes[rng.random_range(0..self.volumes.len())].view())
            .collect()
    }
}

/// One study prepared for control training: normalized noisy frames plus the
/// pseudo-clean target from the same study.
pub struct PhaseBItem {
    pub frames: Array4<f32>,
    pub target: Volume,
}

/// Condition-paired training data. Stacks are built per draw, so the set
/// stores each study once regardless of how many frames get sampled.
pub struct PhaseBSet {
    pub items: Vec<PhaseBItem>,
    pub sigma_smooth: f64,
}

/// One control-training example: the clean target and its condition stack.
pub struct CondSample<'a> {
    pub target: ArrayView3<'a, f32>,
    pub cond: Feat,
}

impl PhaseBSet {
    pub fn from_studies(studies: &[DynamicStudy], sigma_smooth: f64) -> Result<Self> {
        if studies.is_empty() {
            return Err(DecadeError::validation("phase B needs at least one study"));
        }
        if sigma_smooth < 0.0 {
            return Err(DecadeError::validation("sigma_smooth must be nonnegative"));
        }
        let mut items = Vec::with_capacity(studies.len());
        for s in studies {
            let norm = NormScale::fit(s)?.normalize_study(s);
            let target = mean_static(&norm, STATIC_WINDOW_S.0, STATIC_WINDOW_S.1)?;
            items.push(PhaseBItem { frames: norm.frames, target });
        }
        Ok(PhaseBSet { items, sigma_smooth })
    }

    /// Draws `n` (study, frame) pairs and builds their condition stacks.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Result<Vec<CondSample<'_>>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let item = &self.items[rng.random_range(0..self.items.len())];
            let f = rng.random_range(0..item.frames.dim().0);
            let cond = build_condition(&item.frames, f, self.sigma_smooth)?;
            out.push(CondSample { target: item.target.view(), cond });
        }
        Ok(out)
    }
}

fn draw_eps(rng: &mut impl Rng, dims: (usize, usize, usize)) -> Array3<f32> {
    let n = dims.0 * dims.1 * dims.2;
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec(dims, data).expect("length matches dims")
}

/// Per-voxel mean squared error of one prediction, and the gradient of the
/// batch-mean loss with respect to that prediction.
fn mse_and_grad(y: &Feat, eps: &Array3<f32>, batch_len: usize) -> (f64, Feat) {
    let n = eps.len();
    let norm = 2.0 / (batch_len * n) as f32;
    let mut dy = y.clone();
    let mut sq = 0.0f64;
    {
        let mut ch = dy.index_axis_mut(Axis(0), 0);
        ch.zip_mut_with(eps, |d, &e| {
            let diff = *d - e;
            sq += diff as f64 * diff as f64;
            *d = norm * diff;
        });
    }
    (sq / n as f64, dy)
}

/// Noise-prediction objective over a batch of clean volumes, with optional
/// parameter-gradient accumulation.
///
/// Each element draws its own step t uniformly and its own standard-normal
/// eps, noises the volume forward, and scores the prediction. The scalar is
/// the mean over batch elements and voxels. A non-finite loss is an error.
pub fn loss_base(
    model: &BaseModel,
    store: &ParamStore,
    batch: &[ArrayView3<'_, f32>],
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
    mut grads: Option<&mut Grads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DecadeError::validation("empty training batch"));
    }
    let mut total = 0.0f64;
    for x0 in batch {
        let t = rng.random_range(1..=sched.n_steps);
        let eps = draw_eps(rng, x0.dim());
        let x_t = q_sample(x0, &eps.view(), t, sched).insert_axis(Axis(0));
        let (y, ctx) = model.forward(store, &x_t, t);
        let (mse, dy) = mse_and_grad(&y, &eps, batch.len());
        total += mse;
        if let Some(g) = grads.as_deref_mut() {
            model.backward(store, &ctx, &dy, Some(g));
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(DecadeError::numerical(format!("non-finite training loss {loss}")));
    }
    Ok(loss)
}

/// Conditional objective for the control branch.
///
/// Draws (t, eps) in the same order as [`loss_base`], so at control-branch
/// initialization the two losses agree exactly on identical batches and
/// seeds. The base never receives gradients here; only `ctrl_grads` can
/// accumulate.
pub fn loss_control(
    model: &ConditionalModel,
    base_store: &ParamStore,
    ctrl_store: &ParamStore,
    batch: &[CondSample<'_>],
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
    mut ctrl_grads: Option<&mut Grads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DecadeError::validation("empty training batch"));
    }
    let mut total = 0.0f64;
    for s in batch {
        let t = rng.random_range(1..=sched.n_steps);
        let eps = draw_eps(rng, s.target.dim());
        let x_t = q_sample(&s.target, &eps.view(), t, sched).insert_axis(Axis(0));
        let (y, ctx) = model.forward(base_store, ctrl_store, &x_t, t, &s.cond);
        let (mse, dy) = mse_and_grad(&y, &eps, batch.len());
        total += mse;
        if let Some(g) = ctrl_grads.as_deref_mut() {
            model.backward(base_store, ctrl_store, &ctx, &dy, None, Some(g), false);
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(DecadeError::numerical(format!("non-finite training loss {loss}")));
    }
    Ok(loss)
}

/// Artifact locations of one training phase.
pub struct TrainOutputs {
    /// Checkpoint path without extension; `.bin` and `.json` are appended.
    pub checkpoint: PathBuf,
    /// CSV loss log; resume appends to it.
    pub log: PathBuf,
}

/// What a finished phase reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_done: u64,
    /// Loss of the last executed step; `None` when resume had nothing left.
    pub final_loss: Option<f64>,
}

/// Append-mode CSV logger with columns step, loss, lr, wall_s. Wall time is
/// measured from the start of the current call, so a resumed run restarts
/// the clock.
struct TrainLog {
    file: std::fs::File,
    started: Instant,
}

impl TrainLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "step,loss,lr,wall_s")?;
        }
        Ok(TrainLog { file, started: Instant::now() })
    }

    fn record(&mut self, step: u64, loss: f64, lr: f64) -> Result<()> {
        writeln!(
            self.file,
            "{step},{loss:.10e},{lr:.10e},{:.3}",
            self.started.elapsed().as_secs_f64()
        )?;
        Ok(())
    }
}

/// Parameter shadow following an exponential moving average of the store.
struct EmaShadow {
    decay: f32,
    flat: Vec<f32>,
}

impl EmaShadow {
    fn new(store: &ParamStore, decay: f64) -> Self {
        EmaShadow { decay: decay as f32, flat: store.flat_data() }
    }

    fn update(&mut self, store: &ParamStore) {
        let d = self.decay;
        let mut off = 0;
        for p in store.iter() {
            for (e, &x) in self.flat[off..off + p.data.len()].iter_mut().zip(&p.data) {
                *e = d * *e + (1.0 - d) * x;
            }
            off += p.data.len();
        }
    }

    /// Store with the shadow values in the original layout.
    fn materialize(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        out.load_flat(&self.flat).expect("shadow matches store layout");
        out
    }
}

fn save_with_step(
    base: &Path,
    proto: &CheckpointManifest,
    store: &ParamStore,
    step: u64,
) -> Result<()> {
    let mut m = proto.clone();
    m.step = step;
    save_checkpoint(base, &m, store)
}

fn ema_path(base: &Path) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    base.with_file_name(format!("{stem}-ema"))
}

fn step_context(step: u64, e: DecadeError) -> DecadeError {
    match e {
        DecadeError::Numerical(msg) => DecadeError::numerical(format!("step {step}: {msg}")),
        other => other,
    }
}

/// Runs Phase A from `start_step` (completed steps so far, zero for a fresh
/// run) up to the configured budget.
///
/// `manifest` supplies the architecture, schedule, and seed fields of every
/// checkpoint written; its step field is overwritten per save. The batch and
/// noise draws for step k depend only on (config seed, k), so a resumed run
/// sees the same data stream as an uninterrupted one.
pub fn train_base(
    model: &BaseModel,
    store: &mut ParamStore,
    data: &PhaseASet,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    manifest: &CheckpointManifest,
    out: &TrainOutputs,
    start_step: u64,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if start_step > cfg.total_steps {
        return Err(DecadeError::validation(format!(
            "checkpoint step {start_step} exceeds the {}-step budget",
            cfg.total_steps
        )));
    }
    let mut log = TrainLog::open(&out.log)?;
    let mut adam = Adam::new(store);
    let mut grads = Grads::zeros_like(store);
    let mut ema = cfg.ema_decay.map(|d| EmaShadow::new(store, d));
    let stream = derive_seed(cfg.seed, "phase-a");
    let mut final_loss = None;

    for step in start_step..cfg.total_steps {
        let mut r = stream_rng(stream, step);
        let batch = data.sample(&mut r, cfg.batch_size);
        grads.zero();
        let loss = loss_base(model, store, &batch, sched, &mut r, Some(&mut grads))
            .map_err(|e| step_context(step + 1, e))?;
        let lr = cosine_lr(cfg.learning_rate, step, cfg.total_steps);
        adam.step(store, &grads, lr);
        if let Some(e) = ema.as_mut() {
            e.update(store);
        }
        let done = step + 1;
        final_loss = Some(loss);
        if done % cfg.log_every == 0 || done == cfg.total_steps {
            log.record(done, loss, lr)?;
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            save_with_step(&out.checkpoint, manifest, store, done)?;
        }
    }
    if start_step == cfg.total_steps {
        // No-op resume still guarantees a final checkpoint on disk.
        save_with_step(&out.checkpoint, manifest, store, start_step)?;
    }
    if let Some(e) = &ema {
        save_with_step(&ema_path(&out.checkpoint), manifest, &e.materialize(store), cfg.total_steps)?;
    }
    Ok(TrainSummary { steps_done: cfg.total_steps - start_step, final_loss })
}

/// Runs Phase B: control-branch training against a frozen base.
///
/// Checkpoints carry the frozen base content hash, and the base bytes are
/// re-hashed at the end of the run; any drift is a hard error.
pub fn train_control(
    model: &ConditionalModel,
    base_store: &ParamStore,
    ctrl_store: &mut ParamStore,
    data: &PhaseBSet,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    manifest: &CheckpointManifest,
    out: &TrainOutputs,
    start_step: u64,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if start_step > cfg.total_steps {
        return Err(DecadeError::validation(format!(
            "checkpoint step {start_step} exceeds the {}-step budget",
            cfg.total_steps
        )));
    }
    let frozen_hash = base_store.content_hash();
    let mut proto = manifest.clone();
    proto.frozen_base_hash = Some(frozen_hash.clone());

    let mut log = TrainLog::open(&out.log)?;
    let mut adam = Adam::new(ctrl_store);
    let mut grads = Grads::zeros_like(ctrl_store);
    let mut ema = cfg.ema_decay.map(|d| EmaShadow::new(ctrl_store, d));
    let stream = derive_seed(cfg.seed, "phase-b");
    let mut final_loss = None;

    for step in start_step..cfg.total_steps {
        let mut r = stream_rng(stream, step);
        let batch = data.sample(&mut r, cfg.batch_size)?;
        grads.zero();
        let loss =
            loss_control(model, base_store, ctrl_store, &batch, sched, &mut r, Some(&mut grads))
                .map_err(|e| step_context(step + 1, e))?;
        let lr = cosine_lr(cfg.learning_rate, step, cfg.total_steps);
        adam.step(ctrl_store, &grads, lr);
        if let Some(e) = ema.as_mut() {
            e.update(ctrl_store);
        }
        let done = step + 1;
        final_loss = Some(loss);
        if done % cfg.log_every == 0 || done == cfg.total_steps {
            log.record(done, loss, lr)?;
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            save_with_step(&out.checkpoint, &proto, ctrl_store, done)?;
        }
    }
    if start_step == cfg.total_steps {
        save_with_step(&out.checkpoint, &proto, ctrl_store, start_step)?;
    }
    if let Some(e) = &ema {
        save_with_step(&ema_path(&out.checkpoint), &proto, &e.materialize(ctrl_store), cfg.total_steps)?;
    }
    if base_store.content_hash() != frozen_hash {
        return Err(DecadeError::numerical("frozen base parameters changed during training"));
    }
    Ok(TrainSummary { steps_done: cfg.total_steps - start_step, final_loss })
}
