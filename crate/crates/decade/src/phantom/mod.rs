//! Synthetic dynamic cardiac phantom with known kinetic ground truth.
//!
//! A phantom is a labeled voxel geometry (ellipsoidal myocardial shell,
//! cylindrical ventricle cavities, optional angular perfusion defect) whose
//! tissues follow one-tissue-compartment time-activity curves driven by a
//! gamma-variate blood input. Rendering produces a noiseless activity study,
//! a Poisson-count study, and binomially thinned low-count variants; the
//! decay-corrected activity domain is used for all kinetics.

pub mod tac;

use crate::error::{DecadeError, Result};
use crate::seed::{derive_seed, stream_rng};
use crate::study::{DynamicStudy, FrameSchedule, StudyMeta, Units};
use crate::vol::Volume;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};
pub use tac::{arterial_input, frame_average, sample_aif, tissue_tac, AifParams, TimeGrid};

/// Physical half-life of the simulated tracer, seconds.
pub const HALF_LIFE_S: f64 = 76.4;

/// Decay constant ln2 / half-life, 1/s.
pub fn decay_lambda_per_s() -> f64 {
    std::f64::consts::LN_2 / HALF_LIFE_S
}

/// Survival fraction at time `t_s` for decay constant `lambda_per_s`.
pub fn decay_factor(lambda_per_s: f64, t_s: f64) -> f64 {
    (-lambda_per_s * t_s).exp()
}

/// Internal fine-grid step for TAC evaluation, seconds.
pub const FINE_DT_S: f64 = 0.05;

/// Tissue label codes stored in the labels volume.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const MYO: u8 = 1;
    pub const LV: u8 = 2;
    pub const RV: u8 = 3;
    pub const DEFECT: u8 = 4;
    pub const COUNT: usize = 5;
}

/// One-tissue kinetic triplet in clinical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub k1_ml_min_g: f64,
    pub k2_per_min: f64,
    pub vb: f64,
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1_ml_min_g >= 0.0 && self.k1_ml_min_g.is_finite()) {
            return Err(DecadeError::validation("K1 must be nonnegative and finite"));
        }
        if !(self.k2_per_min >= 0.0 && self.k2_per_min.is_finite()) {
            return Err(DecadeError::validation("k2 must be nonnegative and finite"));
        }
        if !(0.0..=1.0).contains(&self.vb) {
            return Err(DecadeError::validation(format!("Vb {} outside [0, 1]", self.vb)));
        }
        Ok(())
    }
}

/// Angular perfusion defect within the myocardial shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    /// Sector start angle in the (y, x) plane, radians in [-pi, pi).
    pub start_angle_rad: f64,
    /// Sector width, radians in (0, 2 pi).
    pub width_rad: f64,
    /// Multiplier on myocardial K1 inside the sector, in (0, 1).
    pub k1_scale: f64,
}

/// Voxel geometry: all lengths in millimeters, offsets relative to the grid
/// center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Epicardial ellipsoid semi-axes, (z, y, x).
    pub outer_radii_mm: [f64; 3],
    /// Endocardial ellipsoid semi-axes, (z, y, x).
    pub inner_radii_mm: [f64; 3],
    /// Left-ventricle cavity cylinder (axis along z).
    pub lv_radius_mm: f64,
    pub lv_half_height_mm: f64,
    /// Right-ventricle blood pool cylinder.
    pub rv_center_offset_mm: [f64; 3],
    pub rv_radius_mm: f64,
    pub rv_half_height_mm: f64,
    pub defect: Option<DefectSpec>,
}

/// Full description of one synthetic study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Grid dims (Z, Y, X) in voxels.
    pub dims: (usize, usize, usize),
    pub voxel_mm: f64,
    pub geometry: Geometry,
    pub background: TissueParams,
    pub myocardium: TissueParams,
    /// Shared by both ventricle cavities.
    pub blood: TissueParams,
    pub aif: AifParams,
    /// Expected counts per kBq/mL of activity per second of frame time.
    pub sensitivity_cps_per_kbq_ml: f64,
    pub decay_lambda_per_s: f64,
    pub seed: u64,
    pub id: String,
}

impl PhantomSpec {
    /// Desk-scale default: 24^3 voxels at 4 mm, resting myocardial kinetics,
    /// a moderate bolus, and count statistics that leave late frames visibly
    /// noisy at full dose.
    pub fn desk_default() -> Self {
        PhantomSpec {
            dims: (24, 24, 24),
            voxel_mm: 4.0,
            geometry: Geometry {
                outer_radii_mm: [30.0, 32.0, 32.0],
                inner_radii_mm: [20.0, 21.0, 21.0],
                lv_radius_mm: 12.0,
                lv_half_height_mm: 26.0,
                rv_center_offset_mm: [0.0, -38.0, 0.0],
                rv_radius_mm: 7.0,
                rv_half_height_mm: 14.0,
                defect: None,
            },
            background: TissueParams { k1_ml_min_g: 0.08, k2_per_min: 0.12, vb: 0.03 },
            myocardium: TissueParams { k1_ml_min_g: 0.59, k2_per_min: 0.25, vb: 0.30 },
            blood: TissueParams { k1_ml_min_g: 0.0, k2_per_min: 0.0, vb: 1.0 },
            aif: AifParams { amplitude_kbq_ml: 45.0, t0_s: 8.0, alpha: 2.5, tau_s: 7.0 },
            sensitivity_cps_per_kbq_ml: 30.0,
            decay_lambda_per_s: decay_lambda_per_s(),
            seed: 0,
            id: "phantom".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (z, y, x) = self.dims;
        if z < 8 || y < 8 || x < 8 {
            return Err(DecadeError::validation(format!(
                "dims {:?} below the 8-voxel minimum per axis",
                self.dims
            )));
        }
        if !(self.voxel_mm > 0.0) {
            return Err(DecadeError::validation("voxel size must be positive"));
        }
        if !(self.sensitivity_cps_per_kbq_ml > 0.0) {
            return Err(DecadeError::validation("sensitivity must be positive"));
        }
        if !(self.decay_lambda_per_s >= 0.0) {
            return Err(DecadeError::validation("decay constant must be nonnegative"));
        }
        self.background.validate()?;
        self.myocardium.validate()?;
        self.blood.validate()?;
        self.aif.validate()?;
        for r in self.geometry.outer_radii_mm.iter().chain(self.geometry.inner_radii_mm.iter()) {
            if !(*r > 0.0) {
                return Err(DecadeError::validation("ellipsoid radii must be positive"));
            }
        }
        for (o, i) in self.geometry.outer_radii_mm.iter().zip(self.geometry.inner_radii_mm.iter()) {
            if o <= i {
                return Err(DecadeError::validation("outer radii must exceed inner radii"));
            }
        }
        if let Some(d) = &self.geometry.defect {
            if !(d.width_rad > 0.0 && d.width_rad < std::f64::consts::TAU) {
                return Err(DecadeError::validation("defect width outside (0, 2 pi)"));
            }
            if !(d.k1_scale > 0.0 && d.k1_scale < 1.0) {
                return Err(DecadeError::validation("defect K1 scale outside (0, 1)"));
            }
        }
        Ok(())
    }

    /// Kinetic triplet for a label code, defect scaling applied.
    pub fn tissue_for(&self, code: u8) -> TissueParams {
        match code {
            label::MYO => self.myocardium,
            label::LV | label::RV => self.blood,
            label::DEFECT => {
                let scale = self.geometry.defect.map(|d| d.k1_scale).unwrap_or(1.0);
                TissueParams {
                    k1_ml_min_g: self.myocardium.k1_ml_min_g * scale,
                    ..self.myocardium
                }
            }
            _ => self.background,
        }
    }

    /// Draws a randomized variant for dataset generation: geometry, kinetics,
    /// bolus shape, and defect presence all jitter around this spec.
    pub fn sample_variant(&self, id: &str, seed: u64, rng: &mut impl Rng) -> PhantomSpec {
        let mut s = self.clone();
        s.id = id.to_string();
        s.seed = seed;
        for r in s.geometry.outer_radii_mm.iter_mut() {
            *r *= rng.random_range(0.88..1.12);
        }
        for i in 0..3 {
            // Keep the wall at least 6 mm thick.
            let cap = s.geometry.outer_radii_mm[i] - 6.0;
            s.geometry.inner_radii_mm[i] =
                (s.geometry.inner_radii_mm[i] * rng.random_range(0.88..1.12)).min(cap);
        }
        s.geometry.lv_radius_mm *= rng.random_range(0.85..1.15);
        s.myocardium.k1_ml_min_g = rng.random_range(0.45..1.05);
        s.myocardium.k2_per_min = rng.random_range(0.15..0.40);
        s.myocardium.vb = rng.random_range(0.20..0.40);
        s.background.k1_ml_min_g = rng.random_range(0.04..0.12);
        s.aif.amplitude_kbq_ml = rng.random_range(30.0..60.0);
        s.aif.t0_s = rng.random_range(5.0..12.0);
        s.aif.alpha = rng.random_range(2.0..3.2);
        s.aif.tau_s = rng.random_range(5.5..9.0);
        s.geometry.defect = if rng.random_bool(0.5) {
            Some(DefectSpec {
                start_angle_rad: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                width_rad: rng.random_range(0.5..1.4),
                k1_scale: rng.random_range(0.30..0.60),
            })
        } else {
            None
        };
        s
    }
}

/// Ground truth bundle: labels, parameter maps, the analytic noiseless study,
/// the analytic input function, and the per-label fine-grid curves.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    pub labels: Array3<u8>,
    pub k1_map: Volume,
    pub k2_map: Volume,
    pub vb_map: Volume,
    /// Noiseless decay-corrected activity study, kBq/mL.
    pub clean: DynamicStudy,
    /// Analytic blood curve averaged to the frame schedule.
    pub idif_kbq_ml: Vec<f64>,
    /// Per-label fine TACs, indexed by label code.
    pub label_tacs_fine: Vec<Vec<f64>>,
    pub fine_dt_s: f64,
}

/// Paints the label volume from the spec geometry.
///
/// The LV blood pool is the endocardial interior plus a cylinder that pierces
/// the shell at the base (valve plane). Priority: LV, then RV pool, then the
/// shell (defect sector first), else background. Voxel centers sit at
/// (i + 0.5) voxel_mm.
pub fn build_labels(spec: &PhantomSpec) -> Array3<u8> {
    let (nz, ny, nx) = spec.dims;
    let center = [
        nz as f64 * spec.voxel_mm * 0.5,
        ny as f64 * spec.voxel_mm * 0.5,
        nx as f64 * spec.voxel_mm * 0.5,
    ];
    let g = &spec.geometry;
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let p = [
            (z as f64 + 0.5) * spec.voxel_mm - center[0],
            (y as f64 + 0.5) * spec.voxel_mm - center[1],
            (x as f64 + 0.5) * spec.voxel_mm - center[2],
        ];
        let in_cylinder = |c: [f64; 3], r: f64, hh: f64| {
            let dz = p[0] - c[0];
            let dy = p[1] - c[1];
            let dx = p[2] - c[2];
            dz.abs() <= hh && (dy * dy + dx * dx) <= r * r
        };
        let e = |r: &[f64; 3]| {
            (p[0] / r[0]).powi(2) + (p[1] / r[1]).powi(2) + (p[2] / r[2]).powi(2)
        };
        if e(&g.inner_radii_mm) <= 1.0
            || in_cylinder([0.0; 3], g.lv_radius_mm, g.lv_half_height_mm)
        {
            return label::LV;
        }
        if in_cylinder(g.rv_center_offset_mm, g.rv_radius_mm, g.rv_half_height_mm) {
            return label::RV;
        }
        if e(&g.outer_radii_mm) <= 1.0 {
            if let Some(d) = &g.defect {
                let angle = p[1].atan2(p[2]);
                let rel = (angle - d.start_angle_rad).rem_euclid(std::f64::consts::TAU);
                if rel < d.width_rad {
                    return label::DEFECT;
                }
            }
            return label::MYO;
        }
        label::BACKGROUND
    })
}

/// Builds the full ground-truth bundle for a schedule.
pub fn build_truth(spec: &PhantomSpec, schedule: &FrameSchedule) -> Result<PhantomTruth> {
    spec.validate()?;
    schedule.validate()?;
    let labels = build_labels(spec);
    let grid = TimeGrid::covering(schedule.end_s(), FINE_DT_S)?;

    // Per-second rates at the TAC boundary; clinical units stay in the spec.
    let mut label_tacs_fine: Vec<Vec<f64>> = Vec::with_capacity(label::COUNT);
    for code in 0..label::COUNT as u8 {
        let t = spec.tissue_for(code);
        label_tacs_fine.push(tissue_tac(
            t.k1_ml_min_g / 60.0,
            t.k2_per_min / 60.0,
            t.vb,
            &spec.aif,
            &grid,
        )?);
    }
    let frame_means: Vec<Vec<f64>> = label_tacs_fine
        .iter()
        .map(|tac| frame_average(tac, grid.dt_s, schedule))
        .collect::<Result<_>>()?;

    let (nz, ny, nx) = spec.dims;
    let n_frames = schedule.len();
    let mut frames = Array4::<f32>::zeros((n_frames, nz, ny, nx));
    for f in 0..n_frames {
        let mut frame = frames.index_axis_mut(Axis(0), f);
        for ((z, y, x), code) in labels.indexed_iter() {
            frame[[z, y, x]] = frame_means[*code as usize][f] as f32;
        }
    }
    let clean = DynamicStudy {
        frames,
        schedule: schedule.clone(),
        units: Units::KbqPerMl,
        count_fraction: 1.0,
        voxel_mm: spec.voxel_mm,
        meta: StudyMeta {
            seed: spec.seed,
            phantom_id: spec.id.clone(),
            sensitivity_cps_per_kbq_ml: Some(spec.sensitivity_cps_per_kbq_ml),
            decay_lambda_per_s: Some(spec.decay_lambda_per_s),
        },
    };
    clean.validate()?;

    let k1_map = map_from_labels(&labels, |c| spec.tissue_for(c).k1_ml_min_g as f32);
    let k2_map = map_from_labels(&labels, |c| spec.tissue_for(c).k2_per_min as f32);
    let vb_map = map_from_labels(&labels, |c| spec.tissue_for(c).vb as f32);
    let cb = sample_aif(&spec.aif, &grid);
    let idif_kbq_ml = frame_average(&cb, grid.dt_s, schedule)?;

    Ok(PhantomTruth {
        spec: spec.clone(),
        labels,
        k1_map,
        k2_map,
        vb_map,
        clean,
        idif_kbq_ml,
        label_tacs_fine,
        fine_dt_s: grid.dt_s,
    })
}

fn map_from_labels(labels: &Array3<u8>, f: impl Fn(u8) -> f32) -> Volume {
    labels.mapv(f)
}

/// Renders the noiseless activity study and a Poisson-count realization.
///
/// Clean values are duration-averaged decay-corrected activity; expected
/// counts are clean x duration x sensitivity x e^{-lambda t_mid}. Each frame
/// draws from its own RNG stream so frame-parallel generation is
/// reproducible.
pub fn render_frames(
    truth: &PhantomTruth,
    schedule: &FrameSchedule,
    lambda_per_s: f64,
    sensitivity: f64,
    seed: u64,
) -> Result<(DynamicStudy, DynamicStudy)> {
    schedule.validate()?;
    if !(sensitivity > 0.0) {
        return Err(DecadeError::validation("sensitivity must be positive"));
    }
    let grid_end = (truth.label_tacs_fine[0].len() - 1) as f64 * truth.fine_dt_s;
    if schedule.end_s() > grid_end + 1e-9 {
        return Err(DecadeError::validation(format!(
            "schedule end {} s beyond simulated TAC span {} s",
            schedule.end_s(),
            grid_end
        )));
    }

    let frame_means: Vec<Vec<f64>> = truth
        .label_tacs_fine
        .iter()
        .map(|tac| frame_average(tac, truth.fine_dt_s, schedule))
        .collect::<Result<_>>()?;

    let (nz, ny, nx) = truth.spec.dims;
    let n_frames = schedule.len();
    let mut clean_frames = Array4::<f32>::zeros((n_frames, nz, ny, nx));
    let mut noisy_frames = Array4::<f32>::zeros((n_frames, nz, ny, nx));
    let poisson_seed = derive_seed(seed, "poisson");

    for f in 0..n_frames {
        let dur = schedule.durations_s[f];
        let decay = decay_factor(lambda_per_s, schedule.midpoint_s(f));
        let mut rng = stream_rng(poisson_seed, f as u64);
        let mut clean_frame = clean_frames.index_axis_mut(Axis(0), f);
        let mut noisy_frame = noisy_frames.index_axis_mut(Axis(0), f);
        for ((z, y, x), code) in truth.labels.indexed_iter() {
            let activity = frame_means[*code as usize][f];
            clean_frame[[z, y, x]] = activity as f32;
            let mu = activity * dur * sensitivity * decay;
            let counts = if mu > 0.0 {
                Poisson::new(mu)
                    .map_err(|e| DecadeError::numerical(format!("poisson mean {mu}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            noisy_frame[[z, y, x]] = counts as f32;
        }
    }

    let meta = StudyMeta {
        seed,
        phantom_id: truth.spec.id.clone(),
        sensitivity_cps_per_kbq_ml: Some(sensitivity),
        decay_lambda_per_s: Some(lambda_per_s),
    };
    let clean = DynamicStudy {
        frames: clean_frames,
        schedule: schedule.clone(),
        units: Units::KbqPerMl,
        count_fraction: 1.0,
        voxel_mm: truth.spec.voxel_mm,
        meta: meta.clone(),
    };
    let noisy = DynamicStudy {
        frames: noisy_frames,
        schedule: schedule.clone(),
        units: Units::Counts,
        count_fraction: 1.0,
        voxel_mm: truth.spec.voxel_mm,
        meta,
    };
    clean.validate()?;
    noisy.validate()?;
    Ok((clean, noisy))
}

/// Binomial thinning of a counts study: each count survives independently
/// with probability `fraction`; Poisson statistics are preserved with the
/// scaled mean.
pub fn downsample_counts(noisy: &DynamicStudy, fraction: f64, seed: u64) -> Result<DynamicStudy> {
    if noisy.units != Units::Counts {
        return Err(DecadeError::validation("count thinning requires a counts study"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DecadeError::validation(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut out = noisy.clone();
    if fraction == 1.0 {
        return Ok(out);
    }
    let thin_seed = derive_seed(seed, "thin");
    let n_frames = noisy.n_frames();
    for f in 0..n_frames {
        let mut rng = stream_rng(thin_seed, f as u64);
        let mut frame = out.frames.index_axis_mut(Axis(0), f);
        for v in frame.iter_mut() {
            let n = *v as f64;
            if n.fract() != 0.0 || n < 0.0 {
                return Err(DecadeError::validation(format!(
                    "thinning requires integer-valued counts, found {n}"
                )));
            }
            let kept = if n > 0.0 {
                Binomial::new(n as u64, fraction)
                    .map_err(|e| DecadeError::numerical(format!("binomial({n}): {e}")))?
                    .sample(&mut rng)
            } else {
                0
            };
            *v = kept as f32;
        }
    }
    out.count_fraction = noisy.count_fraction * fraction;
    Ok(out)
}

/// Duration-weighted mean of the frames whose midpoints fall inside
/// `[t_start, t_end]`; the default 120-420 s window covers the late,
/// quasi-static part of the 30-frame protocol.
pub fn mean_static(study: &DynamicStudy, t_start_s: f64, t_end_s: f64) -> Result<Volume> {
    let idx = study.schedule.frames_in_window(t_start_s, t_end_s);
    if idx.is_empty() {
        return Err(DecadeError::validation(format!(
            "no frame midpoints inside [{t_start_s}, {t_end_s}] s"
        )));
    }
    let (nz, ny, nx) = study.spatial_dims();
    let mut acc = Array3::<f64>::zeros((nz, ny, nx));
    let mut total = 0.0f64;
    for &f in &idx {
        let d = study.schedule.durations_s[f];
        total += d;
        let frame = study.frames.index_axis(Axis(0), f);
        acc.zip_mut_with(&frame, |a, &v| *a += d * v as f64);
    }
    Ok(acc.mapv(|v| (v / total) as f32))
}

/// Default static-window bounds, seconds.
pub const STATIC_WINDOW_S: (f64, f64) = (120.0, 420.0);

/// Converts a counts study back to decay-corrected activity using the stored
/// sensitivity, decay constant, schedule, and count fraction.
pub fn counts_to_activity(study: &DynamicStudy) -> Result<DynamicStudy> {
    if study.units != Units::Counts {
        return Ok(study.clone());
    }
    let sens = study.meta.sensitivity_cps_per_kbq_ml.ok_or_else(|| {
        DecadeError::validation("counts study lacks sensitivity metadata")
    })?;
    let lambda = study.meta.decay_lambda_per_s.ok_or_else(|| {
        DecadeError::validation("counts study lacks decay constant metadata")
    })?;
    let mut out = study.clone();
    for f in 0..study.n_frames() {
        let dur = study.schedule.durations_s[f];
        let decay = decay_factor(lambda, study.schedule.midpoint_s(f));
        let denom = (dur * sens * decay * study.count_fraction) as f32;
        let mut frame = out.frames.index_axis_mut(Axis(0), f);
        frame.mapv_inplace(|v| v / denom);
    }
    out.units = Units::KbqPerMl;
    out.count_fraction = 1.0;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> PhantomSpec {
        let mut s = PhantomSpec::desk_default();
        s.dims = (12, 12, 12);
        s.voxel_mm = 8.0;
        s.id = "test".into();
        s.seed = 99;
        s
    }

    fn short_schedule() -> FrameSchedule {
        FrameSchedule::from_durations(&[5.0, 5.0, 10.0, 20.0]).unwrap()
    }

    #[test]
    fn decay_factor_hits_half_at_the_half_life() {
        let lambda = decay_lambda_per_s();
        assert_abs_diff_eq!(decay_factor(lambda, HALF_LIFE_S), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda, 0.009072, epsilon = 1e-6);
    }

    #[test]
    fn labels_cover_all_tissues() {
        let spec = small_spec();
        let labels = build_labels(&spec);
        let mut counts = [0usize; label::COUNT];
        for &c in labels.iter() {
            counts[c as usize] += 1;
        }
        assert!(counts[label::BACKGROUND as usize] > 0);
        assert!(counts[label::MYO as usize] > 0, "myocardium empty: {counts:?}");
        assert!(counts[label::LV as usize] > 0, "LV empty: {counts:?}");
        assert!(counts[label::RV as usize] > 0, "RV empty: {counts:?}");
        assert_eq!(counts[label::DEFECT as usize], 0);
    }

    #[test]
    fn defect_sector_reduces_k1_map_only_in_shell() {
        let mut spec = small_spec();
        spec.geometry.defect = Some(DefectSpec {
            start_angle_rad: 0.0,
            width_rad: 1.2,
            k1_scale: 0.4,
        });
        let truth = build_truth(&spec, &short_schedule()).unwrap();
        let mut defect_voxels = 0;
        for ((z, y, x), &c) in truth.labels.indexed_iter() {
            if c == label::DEFECT {
                defect_voxels += 1;
                assert_abs_diff_eq!(
                    truth.k1_map[[z, y, x]],
                    (spec.myocardium.k1_ml_min_g * 0.4) as f32,
                    epsilon = 1e-6
                );
            }
        }
        assert!(defect_voxels > 0);
    }

    #[test]
    fn clean_study_is_piecewise_constant_on_labels() {
        let spec = small_spec();
        let truth = build_truth(&spec, &short_schedule()).unwrap();
        let f = 2;
        let frame = truth.clean.frames.index_axis(Axis(0), f);
        let mut per_label: Vec<Option<f32>> = vec![None; label::COUNT];
        for ((z, y, x), &c) in truth.labels.indexed_iter() {
            let v = frame[[z, y, x]];
            match per_label[c as usize] {
                None => per_label[c as usize] = Some(v),
                Some(prev) => assert_eq!(prev, v),
            }
        }
    }

    #[test]
    fn render_is_bit_reproducible_and_seed_sensitive() {
        let spec = small_spec();
        let schedule = short_schedule();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (_, n1) = render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 7).unwrap();
        let (_, n2) = render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 7).unwrap();
        let (_, n3) = render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 8).unwrap();
        assert_eq!(n1.frames, n2.frames);
        assert_ne!(n1.frames, n3.frames);
    }

    #[test]
    fn zero_activity_voxels_never_count() {
        let mut spec = small_spec();
        spec.background = TissueParams { k1_ml_min_g: 0.0, k2_per_min: 0.0, vb: 0.0 };
        let schedule = short_schedule();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (_, noisy) = render_frames(&truth, &schedule, spec.decay_lambda_per_s, 1e5, 3).unwrap();
        for ((_, z, y, x), &v) in noisy.frames.indexed_iter() {
            if truth.labels[[z, y, x]] == label::BACKGROUND {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn high_sensitivity_counts_track_expectation() {
        // Law of large numbers: at sensitivity 1e6 the count/expectation
        // ratio concentrates tightly around 1.
        let spec = small_spec();
        let schedule = FrameSchedule::from_durations(&[10.0, 10.0]).unwrap();
        let truth = build_truth(&spec, &schedule).unwrap();
        let sens = 1e6;
        let (clean, noisy) =
            render_frames(&truth, &schedule, spec.decay_lambda_per_s, sens, 5).unwrap();
        let mut checked = 0;
        for f in 0..2 {
            let dur = schedule.durations_s[f];
            let decay = decay_factor(spec.decay_lambda_per_s, schedule.midpoint_s(f));
            for ((z, y, x), &c) in clean.frames.index_axis(Axis(0), f).indexed_iter() {
                let mu = c as f64 * dur * sens * decay;
                if mu > 1e6 {
                    let ratio = noisy.frames[[f, z, y, x]] as f64 / mu;
                    assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio} at mu {mu}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn thinning_identity_at_fraction_one() {
        let spec = small_spec();
        let schedule = short_schedule();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (_, noisy) = render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 7).unwrap();
        let same = downsample_counts(&noisy, 1.0, 1).unwrap();
        assert_eq!(same.frames, noisy.frames);
        assert_eq!(same.count_fraction, 1.0);
    }

    #[test]
    fn thinning_rejects_bad_inputs() {
        let spec = small_spec();
        let schedule = short_schedule();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (clean, noisy) =
            render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 7).unwrap();
        assert!(downsample_counts(&clean, 0.5, 1).is_err());
        assert!(downsample_counts(&noisy, 0.0, 1).is_err());
        assert!(downsample_counts(&noisy, 1.5, 1).is_err());
    }

    #[test]
    fn thinning_composition_matches_single_thin_in_moments() {
        // Thinning by 0.5 then 0.3 must match thinning by 0.15 in mean and
        // variance; checked on repeated draws of a single hot voxel.
        let mu = 2000.0f64;
        let reps = 3000usize;
        let mut spec = small_spec();
        spec.dims = (8, 8, 8);
        let schedule = FrameSchedule::from_durations(&[5.0]).unwrap();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (_, mut noisy) =
            render_frames(&truth, &schedule, spec.decay_lambda_per_s, 30.0, 11).unwrap();
        noisy.frames.fill(mu as f32);

        let mut once = Vec::with_capacity(reps);
        let mut twice = Vec::with_capacity(reps);
        for i in 0..reps {
            let a = downsample_counts(&noisy, 0.15, 1000 + i as u64).unwrap();
            once.push(a.frames[[0, 0, 0, 0]] as f64);
            let b = downsample_counts(&noisy, 0.5, 2000 + i as u64).unwrap();
            let c = downsample_counts(&b, 0.3, 3000 + i as u64).unwrap();
            twice.push(c.frames[[0, 0, 0, 0]] as f64);
            assert_abs_diff_eq!(c.count_fraction, 0.15, epsilon = 1e-12);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            (m, var)
        };
        let (m1, v1) = stats(&once);
        let (m2, v2) = stats(&twice);
        let expect_mean = mu * 0.15;
        // Binomial thinning of a constant n: variance n f (1 - f).
        let expect_var = mu * 0.15 * 0.85;
        for (m, v) in [(m1, v1), (m2, v2)] {
            assert!((m - expect_mean).abs() < 0.05 * expect_mean, "mean {m}");
            assert!((v - expect_var).abs() < 0.15 * expect_var, "var {v}");
        }
    }

    #[test]
    fn mean_static_weights_by_duration() {
        let schedule = FrameSchedule::from_durations(&[30.0, 80.0]).unwrap();
        let mut frames = Array4::<f32>::zeros((2, 2, 2, 2));
        frames.index_axis_mut(Axis(0), 0).fill(1.0);
        frames.index_axis_mut(Axis(0), 1).fill(3.0);
        let study = DynamicStudy {
            frames,
            schedule,
            units: Units::KbqPerMl,
            count_fraction: 1.0,
            voxel_mm: 4.0,
            meta: StudyMeta {
                seed: 0,
                phantom_id: "t".into(),
                sensitivity_cps_per_kbq_ml: None,
                decay_lambda_per_s: None,
            },
        };
        let m = mean_static(&study, 0.0, 110.0).unwrap();
        let expect = (1.0 * 30.0 + 3.0 * 80.0) / 110.0;
        for &v in m.iter() {
            assert_abs_diff_eq!(v, expect as f32, epsilon = 1e-6);
        }
        assert!(mean_static(&study, 500.0, 600.0).is_err());
    }

    #[test]
    fn default_static_window_selects_the_late_frames() {
        let s = FrameSchedule::protocol_30_frame();
        let idx = s.frames_in_window(STATIC_WINDOW_S.0, STATIC_WINDOW_S.1);
        assert_eq!(idx.first(), Some(&19));
        assert_eq!(idx.last(), Some(&29));
        assert_eq!(idx.len(), 11);
    }

    #[test]
    fn counts_to_activity_inverts_the_expectation_map() {
        let spec = small_spec();
        let schedule = short_schedule();
        let truth = build_truth(&spec, &schedule).unwrap();
        let (clean, noisy) =
            render_frames(&truth, &schedule, spec.decay_lambda_per_s, 1e6, 5).unwrap();
        let act = counts_to_activity(&noisy).unwrap();
        assert_eq!(act.units, Units::KbqPerMl);
        // At enormous sensitivity the activity estimate converges on clean.
        let mut max_rel = 0.0f64;
        for (a, c) in act.frames.iter().zip(clean.frames.iter()) {
            if *c > 0.1 {
                max_rel = max_rel.max(((a - c).abs() / c) as f64);
            }
        }
        assert!(max_rel < 0.02, "max relative error {max_rel}");
    }

    #[test]
    fn variant_sampling_is_deterministic_per_rng_state() {
        let base = small_spec();
        let mut r1 = crate::seed::rng(5);
        let mut r2 = crate::seed::rng(5);
        let a = base.sample_variant("v", 1, &mut r1);
        let b = base.sample_variant("v", 1, &mut r2);
        assert_eq!(a, b);
        a.validate().unwrap();
    }
}
