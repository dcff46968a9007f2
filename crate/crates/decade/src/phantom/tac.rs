//! Analytic input function and tissue time-activity curves.
//!
//! Blood input is a gamma-variate bolus; tissue curves follow the one-tissue
//! compartment model C_T = K1 (C_b conv exp(-k2 t)) + Vb C_b evaluated on a
//! uniform fine grid. All rates here are per second; callers owning
//! per-minute parameters divide by 60 at this boundary.

use crate::error::{DecadeError, Result};
use crate::study::FrameSchedule;

/// Gamma-variate arterial input parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AifParams {
    /// Scale in kBq/mL.
    pub amplitude_kbq_ml: f64,
    /// Bolus arrival delay in seconds.
    pub t0_s: f64,
    /// Shape exponent.
    pub alpha: f64,
    /// Time scale in seconds.
    pub tau_s: f64,
}

impl AifParams {
    pub fn new(amplitude_kbq_ml: f64, t0_s: f64, alpha: f64, tau_s: f64) -> Result<Self> {
        let p = AifParams { amplitude_kbq_ml, t0_s, alpha, tau_s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.amplitude_kbq_ml, self.t0_s, self.alpha, self.tau_s];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DecadeError::validation("AIF parameters must be finite"));
        }
        if self.amplitude_kbq_ml <= 0.0 || self.alpha <= 0.0 || self.tau_s <= 0.0 {
            return Err(DecadeError::validation("AIF requires A > 0, alpha > 0, tau > 0"));
        }
        if self.t0_s < 0.0 {
            return Err(DecadeError::validation("AIF delay t0 must be nonnegative"));
        }
        Ok(())
    }

    /// Time of the curve maximum: t0 + alpha tau.
    pub fn peak_time_s(&self) -> f64 {
        self.t0_s + self.alpha * self.tau_s
    }
}

/// Blood activity C_b(t) = A ((t-t0)/tau)^alpha exp(-(t-t0)/tau), zero at and
/// before the arrival delay.
pub fn arterial_input(t_s: f64, aif: &AifParams) -> f64 {
    if t_s <= aif.t0_s {
        return 0.0;
    }
    let u = (t_s - aif.t0_s) / aif.tau_s;
    aif.amplitude_kbq_ml * u.powf(aif.alpha) * (-u).exp()
}

/// Uniform time grid t_i = i dt for i in 0..=n, covering [0, t_end].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub dt_s: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    /// Grid covering at least `t_end_s` with the given step.
    pub fn covering(t_end_s: f64, dt_s: f64) -> Result<Self> {
        if !(dt_s > 0.0 && dt_s <= 0.1) {
            return Err(DecadeError::validation(format!(
                "fine grid step {dt_s} must be in (0, 0.1] s"
            )));
        }
        if !(t_end_s > 0.0 && t_end_s.is_finite()) {
            return Err(DecadeError::validation("grid end must be positive and finite"));
        }
        let n_steps = (t_end_s / dt_s).ceil() as usize;
        Ok(TimeGrid { dt_s, n_steps })
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_end_s(&self) -> f64 {
        self.n_steps as f64 * self.dt_s
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| i as f64 * self.dt_s).collect()
    }
}

/// Samples the input function on a grid.
pub fn sample_aif(aif: &AifParams, grid: &TimeGrid) -> Vec<f64> {
    (0..=grid.n_steps)
        .map(|i| arterial_input(i as f64 * grid.dt_s, aif))
        .collect()
}

/// Convolution (curve conv exp(-k t)) on a uniform grid by the recursive
/// trapezoidal rule:
///
///   E_n = e^{-k dt} E_{n-1} + (dt/2)(e^{-k dt} c_{n-1} + c_n)
///
/// which is algebraically identical to applying the trapezoidal rule to
/// int_0^{t_n} c(s) e^{-k (t_n - s)} ds, in O(n).
pub fn convolve_exp(curve: &[f64], dt_s: f64, k_per_s: f64) -> Vec<f64> {
    let decay = (-k_per_s * dt_s).exp();
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0f64;
    for (i, &c) in curve.iter().enumerate() {
        if i == 0 {
            out.push(0.0);
            continue;
        }
        acc = decay * acc + 0.5 * dt_s * (decay * curve[i - 1] + c);
        out.push(acc);
    }
    out
}

/// One-tissue compartment tissue curve on the grid: K1 (C_b conv e^{-k2 t})
/// plus the blood-volume term Vb C_b. Rates per second.
pub fn tissue_tac(
    k1_per_s: f64,
    k2_per_s: f64,
    vb: f64,
    aif: &AifParams,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if k1_per_s < 0.0 || k2_per_s < 0.0 {
        return Err(DecadeError::validation("rates must be nonnegative"));
    }
    if !(0.0..=1.0).contains(&vb) {
        return Err(DecadeError::validation(format!("Vb {vb} outside [0, 1]")));
    }
    aif.validate()?;
    let cb = sample_aif(aif, grid);
    let conv = convolve_exp(&cb, grid.dt_s, k2_per_s);
    Ok(cb
        .iter()
        .zip(conv.iter())
        .map(|(&b, &e)| k1_per_s * e + vb * b)
        .collect())
}

/// Duration-mean of a fine-grid curve over each frame: trapezoidal integral
/// across [start, start + duration] divided by the duration.
///
/// Frame boundaries must land on grid nodes and inside the grid.
pub fn frame_average(curve: &[f64], dt_s: f64, schedule: &FrameSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = curve.len();
    let grid_end = (n - 1) as f64 * dt_s;
    if schedule.end_s() > grid_end + 1e-9 {
        return Err(DecadeError::validation(format!(
            "schedule end {} s exceeds simulated span {} s",
            schedule.end_s(),
            grid_end
        )));
    }
    let to_index = |t: f64| -> Result<usize> {
        let raw = t / dt_s;
        let idx = raw.round();
        if (raw - idx).abs() > 1e-6 {
            return Err(DecadeError::validation(format!(
                "frame boundary {t} s does not land on the {dt_s} s grid"
            )));
        }
        Ok(idx as usize)
    };
    let mut out = Vec::with_capacity(schedule.len());
    for f in 0..schedule.len() {
        let i0 = to_index(schedule.starts_s[f])?;
        let i1 = to_index(schedule.starts_s[f] + schedule.durations_s[f])?;
        let mut integral = 0.0f64;
        for i in i0..i1 {
            integral += 0.5 * dt_s * (curve[i] + curve[i + 1]);
        }
        out.push(integral / schedule.durations_s[f]);
    }
    Ok(out)
}
