//! Reverse-process sampling: plain ancestral generation, measurement-guided
//! updates with an exponentially decaying step size, and the model-switching
//! loop that hands off from the unconditional model to the conditional one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array4, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_condition, DiffusionSchedule, NormScale};
use crate::error::{DecadeError, Result};
use crate::nn::{BaseModel, ConditionalModel, Feat, ParamStore};
use crate::seed::{derive_seed, rng};
use crate::study::DynamicStudy;

/// Decay rate of the constraint step size, per reverse step.
pub const DECAY_RATE: f64 = 0.05;
/// Default constraint weight `w`.
pub const DEFAULT_CONSTRAINT_WEIGHT: f64 = 500.0;
/// Default model-switch step.
pub const DEFAULT_SWITCH_STEP: usize = 950;
/// Floor on the squared residual when it divides the step size.
pub const RESIDUAL_FLOOR: f64 = 1e-12;
/// Floor on alpha-bar before it is inverted in the x0 estimate.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// Steps between the two residuals compared by the divergence check.
const DIVERGENCE_WINDOW: usize = 100;
/// Residual growth over the window that aborts sampling.
const DIVERGENCE_FACTOR: f64 = 10.0;

/// How the gradient of the measurement term is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Backpropagates through the denoiser (one vector-Jacobian product).
    ExactVjp,
    /// Treats the denoiser output as constant; no backward pass.
    JacobianIdentityApprox,
}

impl GradMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradMode::ExactVjp => "exact_vjp",
            GradMode::JacobianIdentityApprox => "jacobian_identity_approx",
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradMode {
    type Err = DecadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_vjp" => Ok(GradMode::ExactVjp),
            "jacobian_identity_approx" => Ok(GradMode::JacobianIdentityApprox),
            other => Err(DecadeError::validation(format!(
                "unknown gradient mode {other:?}; expected exact_vjp or jacobian_identity_approx"
            ))),
        }
    }
}

/// Knobs of the guided sampling loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Constraint weight `w`; zero disables guidance entirely.
    pub w: f64,
    /// Switch step: the conditional model serves every `t <= t_c`.
    pub t_c: usize,
    /// Total reverse steps; must match the schedule.
    pub n_steps: usize,
    /// Step-size decay rate per step.
    pub decay_rate: f64,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: DEFAULT_CONSTRAINT_WEIGHT,
            t_c: DEFAULT_SWITCH_STEP,
            n_steps: crate::diffusion::DEFAULT_N_STEPS,
            decay_rate: DECAY_RATE,
            grad_mode: GradMode::ExactVjp,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(DecadeError::validation(format!(
                "constraint weight must be finite and >= 0, got {}",
                self.w
            )));
        }
        if self.t_c > self.n_steps {
            return Err(DecadeError::validation(format!(
                "switch step {} exceeds total steps {}",
                self.t_c, self.n_steps
            )));
        }
        if !(self.decay_rate > 0.0) {
            return Err(DecadeError::validation(format!(
                "decay rate must be > 0, got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }
}

/// Which network produced the noise estimate at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Base,
    Ctrl,
}

impl ModelChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelChoice::Base => "base",
            ModelChoice::Ctrl => "ctrl",
        }
    }
}

/// One reverse step's diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub model: ModelChoice,
    pub residual_sq: f64,
    pub rho: f64,
    pub grad_norm: f64,
}

/// Per-step diagnostics for one sampled frame.
#[derive(Debug, Clone, Default)]
pub struct SamplerTrace {
    pub records: Vec<StepRecord>,
}

impl SamplerTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "model", "residual_sq", "rho", "grad_norm"])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.model.as_str().to_string(),
                format!("{:.17e}", r.residual_sq),
                format!("{:.17e}", r.rho),
                format!("{:.17e}", r.grad_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn tail_dump(&self, n: usize) -> String {
        let lo = self.records.len().saturating_sub(n);
        self.records[lo..]
            .iter()
            .map(|r| {
                format!(
                    "t={} model={} residual_sq={:.6e} rho={:.6e} grad_norm={:.6e}",
                    r.t,
                    r.model.as_str(),
                    r.residual_sq,
                    r.rho,
                    r.grad_norm
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Everything needed to evaluate either network during sampling.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub model: &'a ConditionalModel,
    pub base_store: &'a ParamStore,
    pub ctrl_store: &'a ParamStore,
}

/// Forward context of whichever network served a step; consumed by the
/// vector-Jacobian product of the guidance gradient.
enum StepCtx {
    Base(crate::nn::unet::BaseCtx),
    Ctrl(crate::nn::control::CondFwdCtx),
}

impl Models<'_> {
    fn forward(&self, x: &Feat, t: usize, cond: Option<&Feat>) -> (Feat, StepCtx) {
        match cond {
            None => {
                let (eps, ctx) = self.model.base.forward(self.base_store, x, t);
                (eps, StepCtx::Base(ctx))
            }
            Some(c) => {
                let (eps, ctx) = self.model.forward(self.base_store, self.ctrl_store, x, t, c);
                (eps, StepCtx::Ctrl(ctx))
            }
        }
    }

    fn vjp(&self, ctx: &StepCtx, dy: &Feat) -> Feat {
        match ctx {
            StepCtx::Base(c) => self.model.base.backward(self.base_store, c, dy, None),
            StepCtx::Ctrl(c) => self
                .model
                .backward(self.base_store, self.ctrl_store, c, dy, None, None, true)
                .expect("dx requested"),
        }
    }
}

/// Denoised-image estimate from the noise prediction.
pub fn estimate_x0(x_t: &Feat, t: usize, eps_hat: &Feat, sched: &DiffusionSchedule) -> Feat {
    let a = sched.alpha_bar(t).max(ALPHA_BAR_FLOOR).sqrt() as f32;
    let b = sched.sqrt_one_minus_alpha_bar(t) as f32;
    let mut out = x_t.clone();
    Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o = (*o - b * e) / a;
    });
    out
}

/// One reverse transition: posterior mean plus scheduled noise.
pub fn ancestral_step(
    x_t: &Feat,
    t: usize,
    x0_hat: &Feat,
    z: &Feat,
    sched: &DiffusionSchedule,
) -> Feat {
    let (c0, ct) = sched.posterior_mean_coeffs(t);
    let sigma = sched.posterior_var(t).sqrt();
    let (c0, ct, sigma) = (c0 as f32, ct as f32, sigma as f32);
    let mut out = x_t.clone();
    Zip::from(&mut out).and(x0_hat).and(z).for_each(|o, &x0, &n| {
        *o = c0 * x0 + ct * *o + sigma * n;
    });
    out
}

/// Constraint step size: exponential decay over remaining steps, normalized
/// by the current squared residual.
pub fn step_weight(t: usize, w: f64, residual_sq: f64, n_steps: usize, decay_rate: f64) -> f64 {
    let decay = (-decay_rate * (n_steps - t) as f64).exp();
    decay * w / residual_sq.max(RESIDUAL_FLOOR)
}

fn residual_sq_of(y: &Feat, x0_hat: &Feat) -> f64 {
    let mut s = 0.0f64;
    Zip::from(y).and(x0_hat).for_each(|&a, &b| {
        let d = a as f64 - b as f64;
        s += d * d;
    });
    s
}

fn l2_norm(g: &Feat) -> f64 {
    g.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Gradient of the squared residual with respect to the step input, reusing
/// the forward context of the noise estimate that produced `x0_hat`.
fn gradient_from_ctx(
    y: &Feat,
    x0_hat: &Feat,
    t: usize,
    models: &Models,
    ctx: &StepCtx,
    sched: &DiffusionSchedule,
    mode: GradMode,
) -> Feat {
    let a = sched.alpha_bar(t).max(ALPHA_BAR_FLOOR).sqrt() as f32;
    let b = sched.sqrt_one_minus_alpha_bar(t) as f32;
    let mut r = y.clone();
    Zip::from(&mut r).and(x0_hat).for_each(|rv, &x0| {
        *rv -= x0;
    });
    match mode {
        GradMode::JacobianIdentityApprox => {
            r.mapv_inplace(|v| v * (-2.0 / a));
            r
        }
        GradMode::ExactVjp => {
            let jt_r = models.vjp(ctx, &r);
            let mut g = r;
            Zip::from(&mut g).and(&jt_r).for_each(|gv, &jv| {
                *gv = (-2.0 / a) * *gv + (2.0 * b / a) * jv;
            });
            g
        }
    }
}

/// Standalone gradient of `||y - x0_hat(x_t)||^2` in `x_t`, running its own
/// forward pass; the sampling loop uses the context-reusing path instead.
pub fn guidance_gradient(
    y: &Feat,
    x_t: &Feat,
    t: usize,
    models: &Models,
    cond: Option<&Feat>,
    sched: &DiffusionSchedule,
    mode: GradMode,
) -> Result<Feat> {
    if y.dim() != x_t.dim() {
        return Err(DecadeError::validation(format!(
            "measurement dims {:?} differ from state dims {:?}",
            y.dim(),
            x_t.dim()
        )));
    }
    let (eps, ctx) = models.forward(x_t, t, cond);
    let x0 = estimate_x0(x_t, t, &eps, sched);
    let g = gradient_from_ctx(y, &x0, t, models, &ctx, sched, mode);
    if !g.iter().all(|v| v.is_finite()) {
        return Err(DecadeError::numerical(format!(
            "non-finite guidance gradient at step {t}"
        )));
    }
    Ok(g)
}

fn randn(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Feat {
    let n = dim.0 * dim.1 * dim.2 * dim.3;
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Array4::from_shape_vec(dim, data).expect("shape matches length")
}

/// Plain unconditional ancestral sampling on the base model. Shares the
/// draw order of the guided loop: one full volume for the start, one per
/// step for the transition noise.
pub fn ancestral_sample(
    base: &BaseModel,
    store: &ParamStore,
    sched: &DiffusionSchedule,
    seed: u64,
    dims: (usize, usize, usize),
) -> Feat {
    let mut r = rng(seed);
    let shape = (1, dims.0, dims.1, dims.2);
    let mut x = randn(&mut r, shape);
    for t in (1..=sched.n_steps).rev() {
        let (eps, _) = base.forward(store, &x, t);
        let x0 = estimate_x0(&x, t, &eps, sched);
        let z = randn(&mut r, shape);
        x = ancestral_step(&x, t, &x0, &z, sched);
    }
    x
}

/// The full guided loop: start from noise; per step pick the model by the
/// switch threshold, estimate the clean image, take the ancestral
/// transition, then subtract the weighted measurement gradient.
pub fn decade_sample(
    y: &Feat,
    cond: &Feat,
    models: &Models,
    gcfg: &GuidanceConfig,
    sched: &DiffusionSchedule,
) -> Result<(Feat, SamplerTrace)> {
    gcfg.validate()?;
    if gcfg.n_steps != sched.n_steps {
        return Err(DecadeError::validation(format!(
            "guidance steps {} but schedule has {}",
            gcfg.n_steps,
            sched.n_steps
        )));
    }
    if y.dim().0 != 1 {
        return Err(DecadeError::validation(format!(
            "measurement must be single-channel, got {} channels",
            y.dim().0
        )));
    }

    let mut r = rng(gcfg.seed);
    let shape = y.dim();
    let mut x = randn(&mut r, shape);
    let mut trace = SamplerTrace::default();

    for t in (1..=gcfg.n_steps).rev() {
        let use_ctrl = t <= gcfg.t_c;
        let (eps, ctx) = models.forward(&x, t, if use_ctrl { Some(cond) } else { None });
        let x0 = estimate_x0(&x, t, &eps, sched);

        let residual_sq = residual_sq_of(y, &x0);
        if !residual_sq.is_finite() {
            return Err(DecadeError::numerical(format!(
                "non-finite residual at step {t}; trace tail: {}",
                trace.tail_dump(3)
            )));
        }

        let z = randn(&mut r, shape);
        let mut x_next = ancestral_step(&x, t, &x0, &z, sched);

        let rho = step_weight(t, gcfg.w, residual_sq, gcfg.n_steps, gcfg.decay_rate);
        let mut grad_norm = 0.0;
        if gcfg.w > 0.0 {
            let g = gradient_from_ctx(y, &x0, t, models, &ctx, sched, gcfg.grad_mode);
            grad_norm = l2_norm(&g);
            if !grad_norm.is_finite() {
                return Err(DecadeError::numerical(format!(
                    "non-finite guidance gradient at step {t}; trace tail: {}",
                    trace.tail_dump(3)
                )));
            }
            let rho_f = rho as f32;
            Zip::from(&mut x_next).and(&g).for_each(|xv, &gv| {
                *xv -= rho_f * gv;
            });
        }

        let model = if use_ctrl { ModelChoice::Ctrl } else { ModelChoice::Base };
        trace.records.push(StepRecord { t, model, residual_sq, rho, grad_norm });

        let n = trace.records.len();
        if n > DIVERGENCE_WINDOW {
            let then = trace.records[n - 1 - DIVERGENCE_WINDOW].residual_sq;
            if residual_sq > DIVERGENCE_FACTOR * then {
                return Err(DecadeError::numerical(format!(
                    "sampling diverged at step {t}: residual_sq {residual_sq:.6e} vs \
                     {then:.6e} {DIVERGENCE_WINDOW} steps earlier; trace tail: {},",
                    trace.tail_dump(3)
                )));
            }
        }

        x = x_next;
    }
    Ok((x, trace))
}

/// Outcome of one frame in a study-level run.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub frame: usize,
    pub trace: SamplerTrace,
    /// Set when sampling failed; the output then carries the input frame.
    pub error: Option<String>,
}

/// Study-level result: the output frames plus per-frame diagnostics.
#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub study: DynamicStudy,
    pub per_frame: Vec<FrameOutcome>,
}

impl DenoiseOutcome {
    pub fn is_complete(&self) -> bool {
        self.per_frame.iter().all(|f| f.error.is_none())
    }
}

/// Runs the guided loop over every frame of a study. Frames are normalized
/// by the study-wide scale, conditioned on their smoothed neighbors, and
/// denormalized on the way out; a failed frame keeps its noisy input and is
/// flagged in its outcome.
pub fn denoise_study(
    study: &DynamicStudy,
    models: &Models,
    gcfg: &GuidanceConfig,
    sched: &DiffusionSchedule,
    sigma_smooth: f64,
) -> Result<DenoiseOutcome> {
    study.validate()?;
    gcfg.validate()?;
    let scale = NormScale::fit(study)?;
    let norm = scale.normalize_study(study);
    let n_frames = norm.n_frames();

    let mut out = study.clone();
    let mut per_frame = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let cond = build_condition(&norm.frames, f, sigma_smooth)?;
        let y = norm.frames.index_axis(Axis(0), f).to_owned().insert_axis(Axis(0));
        let frame_cfg = GuidanceConfig {
            seed: derive_seed(gcfg.seed, &format!("frame-{f:03}")),
            ..gcfg.clone()
        };
        match decade_sample(&y, &cond, models, &frame_cfg, sched) {
            Ok((x0, trace)) => {
                let vol = x0.index_axis(Axis(0), 0);
                let denorm = scale.denormalize(&vol);
                out.frames.index_axis_mut(Axis(0), f).assign(&denorm);
                per_frame.push(FrameOutcome { frame: f, trace, error: None });
            }
            Err(e) => {
                per_frame.push(FrameOutcome {
                    frame: f,
                    trace: SamplerTrace::default(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(DenoiseOutcome { study: out, per_frame })
}
