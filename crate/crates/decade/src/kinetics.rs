//! One-tissue-compartment quantification: IDIF extraction, basis-function
//! fitting, and flow conversion.
//!
//! The tissue model is C_T(t) = K1 (C_b conv e^{-k2 t}) + Vb C_b(t) with K1
//! in mL/min/g and k2 in 1/min; the convolution integral runs in minutes so
//! fitted K1 carries clinical units directly. Blood input C_b comes from a
//! left-ventricle mask as per-frame means of decay-corrected activity. Fits
//! are linear in (K1, Vb) for each candidate k2 on a fixed grid, so the
//! per-voxel solve is a constrained 2x2 least squares plus an argmin over
//! the grid. Flow conversion inverts the generalized Renkin-Crone relation
//! K1 = MBF (1 - a e^{-b/MBF}).

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{DecadeError, Result};
use crate::phantom::FINE_DT_S;
use crate::phantom::tac::convolve_exp;
use crate::study::{write_volume, DynamicStudy, FrameSchedule, Units};
use crate::vol::Volume;

/// Renkin-Crone extraction parameters.
pub const RC_A: f64 = 0.77;
pub const RC_B: f64 = 0.63;

/// Admissible clearance range for any fitting grid, 1/min.
pub const K2_BOUNDS_PER_MIN: (f64, f64) = (0.0, 10.0);

/// Default grid: 64 log-spaced clearance values spanning physiologic
/// rubidium kinetics; quantization keeps K1 recovery inside 2% in the
/// noiseless oracle tests.
pub const K2_GRID_LEN: usize = 64;
pub const K2_GRID_MIN_PER_MIN: f64 = 0.01;
pub const K2_GRID_MAX_PER_MIN: f64 = 3.0;

pub fn default_k2_grid() -> Vec<f64> {
    let ratio = K2_GRID_MAX_PER_MIN / K2_GRID_MIN_PER_MIN;
    let mut grid: Vec<f64> = (0..K2_GRID_LEN)
        .map(|i| K2_GRID_MIN_PER_MIN * ratio.powf(i as f64 / (K2_GRID_LEN - 1) as f64))
        .collect();
    grid[0] = K2_GRID_MIN_PER_MIN;
    grid[K2_GRID_LEN - 1] = K2_GRID_MAX_PER_MIN;
    grid
}

/// Image-derived input function: blood activity at frame midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Idif {
    pub times_s: Vec<f64>,
    pub values_kbq_ml: Vec<f64>,
    /// Descriptor of the source region.
    pub source: String,
}

impl Idif {
    pub fn validate(&self) -> Result<()> {
        if self.times_s.len() != self.values_kbq_ml.len() {
            return Err(DecadeError::validation("IDIF times/values length mismatch"));
        }
        if self.times_s.is_empty() {
            return Err(DecadeError::validation("IDIF is empty"));
        }
        for i in 1..self.times_s.len() {
            if !(self.times_s[i] > self.times_s[i - 1]) {
                return Err(DecadeError::validation(
                    "IDIF times must be strictly increasing",
                ));
            }
        }
        for (i, v) in self.values_kbq_ml.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(DecadeError::validation(format!(
                    "IDIF value {v} at frame {i} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame mean over a blood-pool mask. The study must already be in
/// decay-corrected activity units (convert counts via `counts_to_activity`).
pub fn extract_idif(study: &DynamicStudy, mask: &Array3<bool>) -> Result<Idif> {
    study.validate()?;
    if study.units != Units::KbqPerMl {
        return Err(DecadeError::validation(
            "IDIF extraction requires decay-corrected activity units",
        ));
    }
    if mask.dim() != study.spatial_dims() {
        return Err(DecadeError::validation(format!(
            "mask dims {:?} do not match study dims {:?}",
            mask.dim(),
            study.spatial_dims()
        )));
    }
    let n_vox = mask.iter().filter(|&&m| m).count();
    if n_vox == 0 {
        return Err(DecadeError::validation("blood-pool mask is empty"));
    }
    let n_frames = study.n_frames();
    let mut values = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = study.frames.index_axis(ndarray::Axis(0), f);
        let mut sum = 0.0f64;
        for ((z, y, x), &m) in mask.indexed_iter() {
            if m {
                sum += frame[[z, y, x]] as f64;
            }
        }
        values.push(sum / n_vox as f64);
    }
    let idif = Idif {
        times_s: study.schedule.midpoints_s(),
        values_kbq_ml: values,
        source: format!("mask:{n_vox} voxels"),
    };
    idif.validate()?;
    Ok(idif)
}

/// Boolean mask of voxels whose label is in `codes`.
pub fn label_mask(labels: &Array3<u8>, codes: &[u8]) -> Array3<bool> {
    labels.mapv(|c| codes.contains(&c))
}

/// Reconstructs a fine-grid blood curve from frame means: piecewise linear
/// with knots at the frame boundaries, where each frame's segment is chosen
/// to integrate to the measured mean (v_{f+1} = 2 m_f - v_f, anchored at
/// zero at injection time). Mean preservation is exact except where the
/// recursion would drive a knot negative, which clamps at zero.
pub fn reconstruct_fine_curve(idif: &Idif, schedule: &FrameSchedule) -> Result<Vec<f64>> {
    idif.validate()?;
    schedule.validate()?;
    let n = schedule.len();
    if idif.values_kbq_ml.len() != n {
        return Err(DecadeError::validation(format!(
            "IDIF has {} frames, schedule has {}",
            idif.values_kbq_ml.len(),
            n
        )));
    }
    let mids = schedule.midpoints_s();
    for (a, b) in idif.times_s.iter().zip(mids.iter()) {
        if (a - b).abs() > 1e-6 {
            return Err(DecadeError::validation(
                "IDIF times do not match schedule midpoints",
            ));
        }
    }
    // A leading acquisition gap would leave the bolus history unobserved,
    // which no interpolation can recover.
    if schedule.starts_s[0].abs() > 1e-9 {
        return Err(DecadeError::validation(
            "blood-curve reconstruction requires a schedule starting at t = 0",
        ));
    }

    let m = &idif.values_kbq_ml;
    let mut v = vec![0.0f64; n + 1];
    for f in 0..n {
        v[f + 1] = (2.0 * m[f] - v[f]).max(0.0);
    }

    let dt = FINE_DT_S;
    let n_nodes = (schedule.end_s() / dt).round() as usize + 1;
    let mut out = Vec::with_capacity(n_nodes);
    let mut f = 0usize;
    for i in 0..n_nodes {
        let t = i as f64 * dt;
        while f + 1 < n && t > schedule.starts_s[f] + schedule.durations_s[f] {
            f += 1;
        }
        let w = ((t - schedule.starts_s[f]) / schedule.durations_s[f]).clamp(0.0, 1.0);
        out.push(v[f] * (1.0 - w) + v[f + 1] * w);
    }
    Ok(out)
}

/// Precomputed convolution regressors for one IDIF and schedule.
#[derive(Debug, Clone)]
pub struct BasisSet {
    /// Clearance grid, 1/min, strictly increasing.
    pub k2_per_min: Vec<f64>,
    /// Frame-averaged basis curves, one row per grid value. The convolution
    /// integral runs in minutes, so a K1 in mL/min/g multiplies these
    /// directly.
    pub curves: Array2<f64>,
    /// Duration weights normalized to mean 1, so equal-duration schedules
    /// reproduce the unweighted residual.
    pub weights: Vec<f64>,
    /// Weighted self-products sum_f w_f B_jf^2, one per basis.
    gram_bb: Vec<f64>,
}

impl BasisSet {
    pub fn n_frames(&self) -> usize {
        self.curves.ncols()
    }

    pub fn len(&self) -> usize {
        self.k2_per_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k2_per_min.is_empty()
    }
}

fn validate_grid(k2_grid: &[f64]) -> Result<()> {
    if k2_grid.is_empty() {
        return Err(DecadeError::validation("k2 grid is empty"));
    }
    for &k in k2_grid {
        if !k.is_finite() || k < K2_BOUNDS_PER_MIN.0 || k > K2_BOUNDS_PER_MIN.1 {
            return Err(DecadeError::validation(format!(
                "k2 {k} outside admissible bounds {:?} 1/min",
                K2_BOUNDS_PER_MIN
            )));
        }
    }
    for i in 1..k2_grid.len() {
        if !(k2_grid[i] > k2_grid[i - 1]) {
            return Err(DecadeError::validation("k2 grid must be strictly increasing"));
        }
    }
    Ok(())
}

/// Builds frame-averaged basis curves B_j = C_b conv e^{-k2_j t} from the
/// reconstructed fine-grid blood curve.
pub fn build_basis(idif: &Idif, k2_grid: &[f64], schedule: &FrameSchedule) -> Result<BasisSet> {
    validate_grid(k2_grid)?;
    let fine = reconstruct_fine_curve(idif, schedule)?;
    let n_frames = schedule.len();
    let mut curves = Array2::<f64>::zeros((k2_grid.len(), n_frames));
    for (j, &k2) in k2_grid.iter().enumerate() {
        // Per-second decay in the recursion, minute-denominated integral.
        let conv = convolve_exp(&fine, FINE_DT_S, k2 / 60.0);
        let avg = crate::phantom::tac::frame_average(&conv, FINE_DT_S, schedule)?;
        for (f, v) in avg.iter().enumerate() {
            let b = v / 60.0;
            if !b.is_finite() || b < -1e-12 {
                return Err(DecadeError::numerical(format!(
                    "basis {j} frame {f} is {b}"
                )));
            }
            curves[[j, f]] = b.max(0.0);
        }
    }
    let mean_dur: f64 =
        schedule.durations_s.iter().sum::<f64>() / schedule.len() as f64;
    let weights: Vec<f64> =
        schedule.durations_s.iter().map(|d| d / mean_dur).collect();
    let gram_bb = (0..k2_grid.len())
        .map(|j| {
            (0..n_frames)
                .map(|f| weights[f] * curves[[j, f]] * curves[[j, f]])
                .sum()
        })
        .collect();
    Ok(BasisSet { k2_per_min: k2_grid.to_vec(), curves, weights, gram_bb })
}

/// One voxel's fitted parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    /// Uptake rate, mL/min/g.
    pub k1: f64,
    /// Clearance, 1/min, always a grid value.
    pub k2: f64,
    /// Fractional blood volume in [0, 1].
    pub vb: f64,
    /// Duration-weighted sum of squared frame errors.
    pub residual: f64,
}

/// Constrained least squares for one candidate clearance: minimizes the
/// weighted residual of tac ~ k1 B + vb C over k1 >= 0, vb in [0, 1]. With
/// two variables the KKT candidates are the interior solution and every
/// active boundary, so the exact minimum comes from enumerating them.
fn solve_k1_vb(
    a11: f64,
    a12: f64,
    a22: f64,
    b1: f64,
    b2: f64,
    s_tt: f64,
) -> (f64, f64, f64) {
    let safe_div = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
    let mut cands: [(f64, f64); 4] = [(0.0, 0.0); 4];
    let mut n_c = 0;
    let det = a11 * a22 - a12 * a12;
    if det > 0.0 {
        let k1 = (b1 * a22 - b2 * a12) / det;
        let vb = (a11 * b2 - a12 * b1) / det;
        if k1 >= 0.0 && (0.0..=1.0).contains(&vb) {
            cands[n_c] = (k1, vb);
            n_c += 1;
        }
    }
    cands[n_c] = (0.0, safe_div(b2, a22).clamp(0.0, 1.0));
    n_c += 1;
    cands[n_c] = (safe_div(b1, a11).max(0.0), 0.0);
    n_c += 1;
    cands[n_c] = (safe_div(b1 - a12, a11).max(0.0), 1.0);
    n_c += 1;

    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &(k1, vb) in &cands[..n_c] {
        let r = s_tt - 2.0 * k1 * b1 - 2.0 * vb * b2
            + k1 * k1 * a11
            + 2.0 * k1 * vb * a12
            + vb * vb * a22;
        if r < best.0 {
            best = (r, k1, vb);
        }
    }
    (best.1, best.2, best.0.max(0.0))
}

/// Fits one tissue curve: for each grid clearance, solve the constrained
/// linear problem in (K1, Vb) and keep the grid point with the smallest
/// weighted residual. Ties keep the smallest clearance.
pub fn fit_voxel(tac: &[f64], basis: &BasisSet, idif: &Idif) -> Result<VoxelFit> {
    let n = basis.n_frames();
    if tac.len() != n {
        return Err(DecadeError::validation(format!(
            "tac has {} frames, basis has {n}",
            tac.len()
        )));
    }
    if idif.values_kbq_ml.len() != n {
        return Err(DecadeError::validation(format!(
            "IDIF has {} frames, basis has {n}",
            idif.values_kbq_ml.len()
        )));
    }
    if tac.iter().any(|v| !v.is_finite()) {
        return Err(DecadeError::numerical("tac contains non-finite values"));
    }
    let w = &basis.weights;
    let c = &idif.values_kbq_ml;
    let mut a22 = 0.0f64;
    let mut b2 = 0.0f64;
    let mut s_tt = 0.0f64;
    for f in 0..n {
        a22 += w[f] * c[f] * c[f];
        b2 += w[f] * c[f] * tac[f];
        s_tt += w[f] * tac[f] * tac[f];
    }
    let mut best = VoxelFit {
        k1: 0.0,
        k2: basis.k2_per_min[0],
        vb: 0.0,
        residual: f64::INFINITY,
    };
    for j in 0..basis.len() {
        let row = basis.curves.row(j);
        let mut a12 = 0.0f64;
        let mut b1 = 0.0f64;
        for f in 0..n {
            a12 += w[f] * row[f] * c[f];
            b1 += w[f] * row[f] * tac[f];
        }
        let (k1, vb, residual) = solve_k1_vb(basis.gram_bb[j], a12, a22, b1, b2, s_tt);
        if residual < best.residual {
            best = VoxelFit { k1, k2: basis.k2_per_min[j], vb, residual };
        }
    }
    Ok(best)
}

/// One ROI row of the summary table: means of the parametric maps over the
/// mask's successfully fitted voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSummary {
    pub roi: String,
    pub k1: f64,
    pub k2: f64,
    pub vb: f64,
    pub mbf: f64,
    pub n_voxels: usize,
    pub residual: f64,
}

/// Voxel-wise parametric maps plus ROI summaries. Failed voxels hold NaN in
/// every map and are excluded from ROI means.
#[derive(Debug, Clone)]
pub struct KineticMaps {
    pub k1: Volume,
    pub k2: Volume,
    pub vb: Volume,
    pub mbf: Volume,
    pub residual: Volume,
    pub n_failed: usize,
    pub roi_summary: Vec<RoiSummary>,
}

/// Fits every voxel of a decay-corrected activity study. Voxel fits are
/// independent and deterministic, so the parallel map is bit-identical to a
/// sequential one.
pub fn fit_volume(
    study: &DynamicStudy,
    idif: &Idif,
    k2_grid: &[f64],
    roi_masks: &[(String, Array3<bool>)],
) -> Result<KineticMaps> {
    // Structural checks only: a study-wide validate would reject the
    // non-finite voxels this fit records as per-voxel failures.
    study.schedule.validate()?;
    if study.frames.dim().0 != study.schedule.len() {
        return Err(DecadeError::validation(format!(
            "frame count {} != schedule length {}",
            study.frames.dim().0,
            study.schedule.len()
        )));
    }
    if study.units != Units::KbqPerMl {
        return Err(DecadeError::validation(
            "kinetic fitting requires decay-corrected activity units",
        ));
    }
    for (name, mask) in roi_masks {
        if mask.dim() != study.spatial_dims() {
            return Err(DecadeError::validation(format!(
                "ROI {name} dims {:?} do not match study dims {:?}",
                mask.dim(),
                study.spatial_dims()
            )));
        }
    }
    let basis = build_basis(idif, k2_grid, &study.schedule)?;
    assert_renkin_crone_monotone()?;

    let (nz, ny, nx) = study.spatial_dims();
    let n_vox = nz * ny * nx;
    let n_frames = study.n_frames();
    let frames = study.frames.as_slice().ok_or_else(|| {
        DecadeError::validation("study frames must be contiguous")
    })?;

    let fits: Vec<Option<VoxelFit>> = (0..n_vox)
        .into_par_iter()
        .map(|v| {
            let mut tac = vec![0.0f64; n_frames];
            for (f, t) in tac.iter_mut().enumerate() {
                *t = frames[f * n_vox + v] as f64;
            }
            if tac.iter().any(|t| !t.is_finite()) {
                return None;
            }
            Some(fit_voxel(&tac, &basis, idif).expect("validated inputs"))
        })
        .collect();

    let dims = (nz, ny, nx);
    let mut k1 = Volume::zeros(dims);
    let mut k2 = Volume::zeros(dims);
    let mut vb = Volume::zeros(dims);
    let mut mbf = Volume::zeros(dims);
    let mut residual = Volume::zeros(dims);
    let mut n_failed = 0usize;
    {
        let (k1s, k2s, vbs, mbfs, rs) = (
            k1.as_slice_mut().unwrap(),
            k2.as_slice_mut().unwrap(),
            vb.as_slice_mut().unwrap(),
            mbf.as_slice_mut().unwrap(),
            residual.as_slice_mut().unwrap(),
        );
        for (v, fit) in fits.iter().enumerate() {
            match fit {
                Some(fit) => {
                    k1s[v] = fit.k1 as f32;
                    k2s[v] = fit.k2 as f32;
                    vbs[v] = fit.vb as f32;
                    mbfs[v] = mbf_from_k1(fit.k1)? as f32;
                    rs[v] = fit.residual as f32;
                }
                None => {
                    n_failed += 1;
                    for s in [&mut *k1s, &mut *k2s, &mut *vbs, &mut *mbfs, &mut *rs] {
                        s[v] = f32::NAN;
                    }
                }
            }
        }
    }

    let mut roi_summary = Vec::with_capacity(roi_masks.len());
    for (name, mask) in roi_masks {
        let mut sums = [0.0f64; 5];
        let mut n = 0usize;
        for ((z, y, x), &m) in mask.indexed_iter() {
            if m && k1[[z, y, x]].is_finite() {
                sums[0] += k1[[z, y, x]] as f64;
                sums[1] += k2[[z, y, x]] as f64;
                sums[2] += vb[[z, y, x]] as f64;
                sums[3] += mbf[[z, y, x]] as f64;
                sums[4] += residual[[z, y, x]] as f64;
                n += 1;
            }
        }
        let d = n.max(1) as f64;
        roi_summary.push(RoiSummary {
            roi: name.clone(),
            k1: sums[0] / d,
            k2: sums[1] / d,
            vb: sums[2] / d,
            mbf: sums[3] / d,
            n_voxels: n,
            residual: sums[4] / d,
        });
    }

    Ok(KineticMaps { k1, k2, vb, mbf, residual, n_failed, roi_summary })
}

/// Forward Renkin-Crone relation K1 = MBF (1 - a e^{-b/MBF}); zero at zero
/// flow by continuity.
pub fn renkin_crone_k1(mbf: f64) -> f64 {
    if mbf <= 0.0 {
        return 0.0;
    }
    mbf * (1.0 - RC_A * (-RC_B / mbf).exp())
}

/// Guards every inversion run: the extraction relation must be strictly
/// increasing over the physiologic range for the bisection root to be
/// unique.
pub fn assert_renkin_crone_monotone() -> Result<()> {
    let n = 2000;
    let (lo, hi) = (1e-3f64, 10.0f64);
    let mut prev = renkin_crone_k1(lo);
    for i in 1..=n {
        let m = lo * (hi / lo).powf(i as f64 / n as f64);
        let v = renkin_crone_k1(m);
        if !(v > prev) {
            return Err(DecadeError::numerical(format!(
                "Renkin-Crone relation not strictly increasing at MBF {m}"
            )));
        }
        prev = v;
    }
    Ok(())
}

/// Inverts K1 = MBF (1 - a e^{-b/MBF}) by bracketed bisection. The relation
/// is strictly increasing with slope approaching 1 - a at high flow, so
/// K1 / (1 - a) bounds the root from above.
pub fn mbf_from_k1(k1: f64) -> Result<f64> {
    if !k1.is_finite() || k1 < 0.0 {
        return Err(DecadeError::validation(format!(
            "K1 {k1} must be finite and nonnegative"
        )));
    }
    if k1 == 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0f64;
    let mut hi = k1 / (1.0 - RC_A) + 1e-6;
    while renkin_crone_k1(hi) < k1 {
        hi *= 2.0;
    }
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if renkin_crone_k1(mid) < k1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Myocardial flow reserve: stress flow over rest flow.
pub fn mfr(stress_mbf: f64, rest_mbf: f64) -> Result<f64> {
    if !(rest_mbf > 0.0) {
        return Err(DecadeError::validation(format!(
            "rest MBF {rest_mbf} must be positive"
        )));
    }
    if !(stress_mbf >= 0.0) {
        return Err(DecadeError::validation(format!(
            "stress MBF {stress_mbf} must be nonnegative"
        )));
    }
    Ok(stress_mbf / rest_mbf)
}

/// Persists the maps, one volume file per parameter, plus the ROI summary
/// table as CSV.
pub fn save_maps(
    dir: &Path,
    maps: &KineticMaps,
    voxel_mm: f64,
    phantom_id: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, vol) in [
        ("k1", &maps.k1),
        ("k2", &maps.k2),
        ("vb", &maps.vb),
        ("mbf", &maps.mbf),
        ("residual", &maps.residual),
    ] {
        write_volume(&dir.join(name), vol, voxel_mm, phantom_id)?;
    }
    write_roi_csv(&dir.join("roi_summary.csv"), &maps.roi_summary)
}

pub fn write_roi_csv(path: &Path, rows: &[RoiSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| DecadeError::format(format!("open {}: {e}", path.display())))?;
    w.write_record(["roi", "K1", "k2", "Vb", "MBF", "n_voxels", "residual"])
        .map_err(|e| DecadeError::format(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.roi.clone(),
            format!("{:.6}", r.k1),
            format!("{:.6}", r.k2),
            format!("{:.6}", r.vb),
            format!("{:.6}", r.mbf),
            r.n_voxels.to_string(),
            format!("{:.6}", r.residual),
        ])
        .map_err(|e| DecadeError::format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
