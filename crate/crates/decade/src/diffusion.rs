//! Forward diffusion schedule, training-time corruption, and the intensity
//! normalization shared by training and sampling.
//!
//! Steps are numbered t = 1..=T. Tables are stored densely with index t-1;
//! the t = 0 boundary uses the convention that the cumulative product of
//! alphas at step 0 is exactly 1, which makes the posterior variance at t = 1
//! exactly zero.

use crate::error::{DecadeError, Result};
use crate::study::DynamicStudy;
use crate::vol::{percentile, smooth3, Volume};
use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Default number of diffusion steps.
pub const DEFAULT_N_STEPS: usize = 1000;
/// Default linear-schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Fraction of intensity mass used for per-study normalization.
pub const NORM_PERCENTILE: f64 = 0.995;

/// Schedule hyperparameters as persisted in checkpoints and configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            n_steps: DEFAULT_N_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.n_steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-step noise tables for a linear variance schedule.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub n_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Linear beta schedule over `n_steps` steps.
pub fn make_schedule(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if n_steps < 2 {
        return Err(DecadeError::validation(format!(
            "schedule needs at least 2 steps, got {n_steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(DecadeError::validation(format!(
            "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let mut beta = Vec::with_capacity(n_steps);
    let mut alpha = Vec::with_capacity(n_steps);
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut posterior_var = Vec::with_capacity(n_steps);
    let mut prod = 1.0f64;
    for i in 0..n_steps {
        let b = beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64;
        let a = 1.0 - b;
        let prev = prod;
        prod *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(prod);
        // prev is the cumulative product one step earlier (1 at i = 0).
        posterior_var.push((1.0 - prev) / (1.0 - prod) * b);
    }
    Ok(DiffusionSchedule { n_steps, beta, alpha, alpha_bar, posterior_var })
}

impl DiffusionSchedule {
    pub fn default_schedule() -> Result<Self> {
        make_schedule(DEFAULT_N_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.n_steps, "step {t} outside 1..={}", self.n_steps);
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// Cumulative product one step before `t`; exactly 1 at t = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        let i = self.idx(t);
        if i == 0 { 1.0 } else { self.alpha_bar[i - 1] }
    }

    /// Variance of the reverse-process transition at step `t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[self.idx(t)]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Coefficients (on the clean image, on the noisy image) of the
    /// reverse-transition mean.
    pub fn posterior_mean_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let b = self.beta(t);
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}

/// Corrupts `x0` to step `t`: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(x0: &ArrayView3<f32>, eps: &ArrayView3<f32>, t: usize, sched: &DiffusionSchedule) -> Volume {
    assert_eq!(x0.dim(), eps.dim(), "x0 and eps dims differ");
    let a = sched.sqrt_alpha_bar(t) as f32;
    let b = sched.sqrt_one_minus_alpha_bar(t) as f32;
    let mut out = x0.to_owned();
    out.zip_mut_with(eps, |x, &e| *x = a * *x + b * e);
    out
}

/// Reverse-conditional mean and variance given the clean and noisy states.
/// At t = 1 the coefficients collapse to (1, 0) and the variance to zero,
/// so the final step returns the clean estimate deterministically.
pub fn q_posterior(
    x0: &ArrayView3<f32>,
    x_t: &ArrayView3<f32>,
    t: usize,
    sched: &DiffusionSchedule,
) -> (Volume, f64) {
    assert_eq!(x0.dim(), x_t.dim(), "x0 and x_t dims differ");
    let (c0, ct) = sched.posterior_mean_coeffs(t);
    let (c0, ct) = (c0 as f32, ct as f32);
    let mut mean = x0.to_owned();
    mean.zip_mut_with(x_t, |m, &x| *m = c0 * *m + ct * x);
    (mean, sched.posterior_var(t))
}

/// Per-study intensity scale mapping the bulk of values into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormScale {
    pub scale: f32,
}

impl NormScale {
    /// Scale from the high percentile of all frame values.
    pub fn fit(study: &DynamicStudy) -> Result<Self> {
        let vals: Vec<f32> = study.frames.iter().cloned().collect();
        let scale = percentile(&vals, NORM_PERCENTILE)?;
        if !(scale > 0.0) {
            return Err(DecadeError::validation(format!(
                "normalization scale {scale} must be positive"
            )));
        }
        Ok(NormScale { scale })
    }

    pub fn normalize(&self, v: &ArrayView3<f32>) -> Volume {
        v.mapv(|x| x / self.scale)
    }

    /// Inverse map; clamps small negative excursions to zero so the result
    /// is a valid activity or count image.
    pub fn denormalize(&self, v: &ArrayView3<f32>) -> Volume {
        v.mapv(|x| (x * self.scale).max(0.0))
    }

    pub fn normalize_study(&self, study: &DynamicStudy) -> DynamicStudy {
        let mut out = study.clone();
        out.frames.mapv_inplace(|x| x / self.scale);
        out
    }
}

/// Number of condition channels: the frame itself plus one temporal
/// neighbor on each side.
pub const CONDITION_CHANNELS: usize = 3;

/// Builds the conditioning stack for frame `f` of a normalized study:
/// channels (f-1, f, f+1) with clamp replication at the ends, each smoothed
/// in-plane-and-depth with an isotropic Gaussian of `sigma_smooth` voxels.
pub fn build_condition(frames: &Array4<f32>, f: usize, sigma_smooth: f64) -> Result<Array4<f32>> {
    let (n_frames, nz, ny, nx) = frames.dim();
    if f >= n_frames {
        return Err(DecadeError::validation(format!(
            "frame {f} out of range for {n_frames}-frame study"
        )));
    }
    if sigma_smooth < 0.0 {
        return Err(DecadeError::validation("sigma_smooth must be nonnegative"));
    }
    let mut out = Array4::zeros((CONDITION_CHANNELS, nz, ny, nx));
    for (c, offset) in [-1i64, 0, 1].iter().enumerate() {
        let src = (f as i64 + offset).clamp(0, n_frames as i64 - 1) as usize;
        let frame = frames.index_axis(Axis(0), src);
        let smoothed = if sigma_smooth > 0.0 { smooth3(&frame, sigma_smooth) } else { frame.to_owned() };
        out.index_axis_mut(Axis(0), c).assign(&smoothed);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::{FrameSchedule, StudyMeta, Units};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_table_endpoints_and_tail() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        // Cross-check the cumulative product against an independent log-sum
        // accumulation.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let rel = (s.alpha_bar(1000) - log_sum.exp()).abs() / log_sum.exp();
        assert!(rel < 1e-12, "rel {rel}");
        assert!(s.alpha_bar(1000) < 1e-3, "terminal signal {}", s.alpha_bar(1000));
    }

    #[test]
    fn alpha_bar_strictly_decreases_and_first_posterior_var_is_zero() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at {t}");
        }
        assert_eq!(s.posterior_var(1), 0.0);
        for t in 2..=1000 {
            assert!(s.posterior_var(t) > 0.0 && s.posterior_var(t) < s.beta(t));
        }
    }

    #[test]
    fn posterior_coefficients_satisfy_noise_free_identity() {
        // On the noise-free trajectory x_t = sqrt(abar_t) x0 the posterior
        // mean must land exactly on sqrt(abar_{t-1}) x0.
        let s = DiffusionSchedule::default_schedule().unwrap();
        for t in 1..=1000 {
            let (c0, ct) = s.posterior_mean_coeffs(t);
            let lhs = c0 + ct * s.sqrt_alpha_bar(t);
            let rhs = s.alpha_bar_prev(t).sqrt();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn variance_decomposition_identity() {
        // 1 - abar_t = alpha_t (1 - abar_{t-1}) + beta_t holds exactly in
        // exact arithmetic; allow rounding at the 1e-15 scale.
        let s = DiffusionSchedule::default_schedule().unwrap();
        for t in 1..=1000 {
            let lhs = 1.0 - s.alpha_bar(t);
            let rhs = s.alpha(t) * (1.0 - s.alpha_bar_prev(t)) + s.beta(t);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
        }
    }

    #[test]
    fn short_schedules_rejected() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(2, 1e-4, 0.02).is_ok());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        let x0 = Array3::from_elem((2, 3, 4), 0.7f32);
        let zero = Array3::zeros((2, 3, 4));
        let noise_free = q_sample(&x0.view(), &zero.view(), 500, &s);
        let a = s.sqrt_alpha_bar(500) as f32;
        for &v in noise_free.iter() {
            assert_abs_diff_eq!(v, 0.7 * a, epsilon = 1e-7);
        }
        let pure_noise = q_sample(&zero.view(), &x0.view(), 500, &s);
        let b = s.sqrt_one_minus_alpha_bar(500) as f32;
        for &v in pure_noise.iter() {
            assert_abs_diff_eq!(v, 0.7 * b, epsilon = 1e-7);
        }
    }

    #[test]
    fn q_sample_terminal_moments_are_standard_normal() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        let mut rng = crate::seed::rng(77);
        let n = 20_000;
        let x0 = Array3::from_elem((1, 1, n), 0.9f32);
        let eps = Array3::from_shape_fn((1, 1, n), |_| {
            <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng)
        });
        let xt = q_sample(&x0.view(), &eps.view(), 1000, &s);
        let mean: f64 = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        // Signal at the terminal step is ~0.9 sqrt(4e-5) ~ 0.006.
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    fn toy_study(frames: Array4<f32>) -> DynamicStudy {
        let n = frames.dim().0;
        let schedule = FrameSchedule::from_durations(&vec![1.0; n]).unwrap();
        DynamicStudy {
            frames,
            schedule,
            units: Units::Counts,
            count_fraction: 1.0,
            voxel_mm: 4.0,
            meta: StudyMeta::default(),
        }
    }

    #[test]
    fn norm_scale_matches_percentile_and_roundtrips() {
        let mut rng = crate::seed::rng(5);
        let frames = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(0.0f32..10.0));
        let study = toy_study(frames.clone());
        let scale = NormScale::fit(&study).unwrap();
        let vals: Vec<f32> = frames.iter().cloned().collect();
        assert_eq!(scale.scale, percentile(&vals, NORM_PERCENTILE).unwrap());

        let v = frames.index_axis(Axis(0), 0).to_owned();
        let n = scale.normalize(&v.view());
        let back = scale.denormalize(&n.view());
        for (&a, &b) in v.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn denormalize_clamps_negatives() {
        let scale = NormScale { scale: 2.0 };
        let v = Array3::from_elem((1, 1, 2), -0.5f32);
        let out = scale.denormalize(&v.view());
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn norm_scale_rejects_all_zero() {
        let study = toy_study(Array4::zeros((2, 2, 4, 4)));
        assert!(NormScale::fit(&study).is_err());
    }

    #[test]
    fn condition_channels_replicate_at_ends() {
        let frames = Array4::from_shape_fn((3, 2, 4, 4), |(f, z, y, x)| {
            (f * 100 + z * 16 + y * 4 + x) as f32
        });
        let first = build_condition(&frames, 0, 0.0).unwrap();
        // Channel 0 clamps to frame 0 itself.
        assert_eq!(
            first.index_axis(Axis(0), 0),
            first.index_axis(Axis(0), 1)
        );
        assert_eq!(
            first.index_axis(Axis(0), 2),
            frames.index_axis(Axis(0), 1)
        );
        let last = build_condition(&frames, 2, 0.0).unwrap();
        assert_eq!(last.index_axis(Axis(0), 1), last.index_axis(Axis(0), 2));
        let mid = build_condition(&frames, 1, 0.0).unwrap();
        for (c, f) in [(0usize, 0usize), (1, 1), (2, 2)] {
            assert_eq!(mid.index_axis(Axis(0), c), frames.index_axis(Axis(0), f));
        }
        assert!(build_condition(&frames, 3, 0.0).is_err());
        assert!(build_condition(&frames, 0, -1.0).is_err());
    }

    #[test]
    fn condition_smoothing_preserves_constants() {
        let frames = Array4::from_elem((2, 4, 6, 6), 3.25f32);
        let cond = build_condition(&frames, 0, 1.0).unwrap();
        for &v in cond.iter() {
            assert_abs_diff_eq!(v, 3.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_schedule_has_closed_form_alpha_bar() {
        let b = 0.003f64;
        let s = make_schedule(50, b, b).unwrap();
        for t in 1..=50 {
            let want = (1.0 - b).powi(t as i32);
            assert!((s.alpha_bar(t) - want).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn posterior_mean_matches_coefficient_oracles() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        // Constant volume: the mean is the coefficient sum, recomputed from
        // the raw tables.
        let v = 0.8f32;
        let x = Array3::from_elem((2, 2, 2), v);
        let t = 700;
        let (mean, var) = q_posterior(&x.view(), &x.view(), t, &s);
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar_prev(t);
        let want = (ab_prev.sqrt() * s.beta(t) + s.alpha(t).sqrt() * (1.0 - ab_prev)) / (1.0 - ab);
        for m in mean.iter() {
            assert!((*m as f64 - v as f64 * want).abs() < 1e-6);
        }
        assert_eq!(var, s.posterior_var(t));

        // Terminal step, from a two-line independent computation.
        let t = 1000;
        let ab_prev = s.alpha_bar(1000) / s.alpha(1000);
        let c0_want = ab_prev.sqrt() * s.beta(t) / (1.0 - s.alpha_bar(t));
        let ct_want = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - s.alpha_bar(t));
        let (c0, ct) = s.posterior_mean_coeffs(t);
        assert!((c0 - c0_want).abs() < 1e-12);
        assert!((ct - ct_want).abs() < 1e-12);
    }

    #[test]
    fn near_zero_beta_posterior_keeps_state() {
        // With vanishing noise x_t stays at x0 and the posterior mean must
        // return it: the coefficient sum tends to one.
        let s = make_schedule(10, 1e-9, 1e-9).unwrap();
        let x = Array3::from_elem((2, 2, 2), 1.7f32);
        for t in 2..=10 {
            let (c0, ct) = s.posterior_mean_coeffs(t);
            // 1 - abar cancels catastrophically at this beta; the f64 noise
            // floor is ~5e-8, above the O(beta) distance from the limit.
            assert!((c0 + ct - 1.0).abs() < 1e-7, "t={t}: {}", c0 + ct);
            let (mean, var) = q_posterior(&x.view(), &x.view(), t, &s);
            for m in mean.iter() {
                assert!((m - 1.7).abs() < 1e-6);
            }
            assert!(var >= 0.0 && var < 1e-9);
        }
    }

    #[test]
    fn final_step_posterior_is_deterministic_clean_estimate() {
        let s = DiffusionSchedule::default_schedule().unwrap();
        let x0 = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| (i + 2 * j + 4 * k) as f32 * 0.1);
        let xt = Array3::from_elem((3, 3, 3), 9.0f32);
        let (mean, var) = q_posterior(&x0.view(), &xt.view(), 1, &s);
        assert_eq!(var, 0.0);
        assert_eq!(mean, x0, "coefficients at t=1 are exactly (1, 0)");
    }

    #[test]
    fn two_step_composition_matches_direct_marginal_moments() {
        // Chaining the forward kernel s steps then t-s more must land on the
        // step-t marginal; checked on sample moments with 3-sigma bands.
        let sched = DiffusionSchedule::default_schedule().unwrap();
        let (s, t) = (300usize, 700usize);
        let n = 10_000;
        let mut rng = crate::seed::rng(123);
        let x0v = 0.75f32;
        let x0 = Array3::from_elem((1, 1, n), x0v);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array3::from_shape_fn((1, 1, n), |_| {
                <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
            })
        };
        let e1 = draw(&mut rng);
        let xs = q_sample(&x0.view(), &e1.view(), s, &sched);

        // Residual kernel from step s to step t: scale sqrt(abar_t/abar_s),
        // noise variance 1 - abar_t/abar_s.
        let ratio = sched.alpha_bar(t) / sched.alpha_bar(s);
        let e2 = draw(&mut rng);
        let mut xt = xs.clone();
        let (a2, b2) = ((ratio.sqrt()) as f32, (1.0 - ratio).sqrt() as f32);
        xt.zip_mut_with(&e2, |x, &e| *x = a2 * *x + b2 * e);

        let mean: f64 = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 =
            xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let want_mean = sched.sqrt_alpha_bar(t) * x0v as f64;
        let want_var = 1.0 - sched.alpha_bar(t);
        // 3-sigma bands for the sample mean and variance of n normals.
        let mean_band = 3.0 * (want_var / n as f64).sqrt();
        let var_band = 3.0 * want_var * (2.0 / n as f64).sqrt();
        assert!((mean - want_mean).abs() < mean_band, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < var_band, "var {var} vs {want_var}");
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold_for_arbitrary_linear_schedules(
            n in 2usize..400,
            b0 in 1e-6f64..5e-3,
            spread in 1.0f64..50.0,
        ) {
            let b1 = (b0 * spread).min(0.5);
            let s = make_schedule(n, b0, b1).unwrap();
            let mut prev = 1.0f64;
            for t in 1..=n {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert!(s.alpha_bar(t) < prev);
                prop_assert!(s.posterior_var(t) >= 0.0);
                prop_assert!(s.posterior_var(t) <= s.beta(t) + 1e-15);
                let (c0, ct) = s.posterior_mean_coeffs(t);
                let lhs = c0 + ct * s.sqrt_alpha_bar(t);
                prop_assert!((lhs - s.alpha_bar_prev(t).sqrt()).abs() < 1e-9);
                prev = s.alpha_bar(t);
            }
            prop_assert_eq!(s.posterior_var(1), 0.0);
        }
    }
}
