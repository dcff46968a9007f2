//! Image-quality and quantification metrics.
//!
//! Pointwise scores (NMSE, PSNR) run over whole volumes in f64. SSIM follows
//! the standard windowed form, computed per 2D slice and averaged over the
//! stack; its data range is taken jointly over both inputs so the score is
//! symmetric in its arguments. PSNR's range is the reference maximum and is
//! reported alongside the score.

use crate::error::{DecadeError, Result};
use crate::study::DynamicStudy;
use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use serde::Serialize;
use std::path::Path;

/// Report schema version written into every CSV.
pub const REPORT_VERSION: u32 = 1;

fn check_dims(pred: &ArrayView3<f32>, reference: &ArrayView3<f32>) -> Result<()> {
    if pred.dim() != reference.dim() {
        return Err(DecadeError::validation(format!(
            "dims {:?} vs {:?} differ",
            pred.dim(),
            reference.dim()
        )));
    }
    Ok(())
}

/// Normalized mean squared error: ||pred - ref||^2 / ||ref||^2.
pub fn nmse(pred: &ArrayView3<f32>, reference: &ArrayView3<f32>) -> Result<f64> {
    check_dims(pred, reference)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&p, &r) in pred.iter().zip(reference.iter()) {
        num += (p as f64 - r as f64).powi(2);
        den += (r as f64).powi(2);
    }
    if den == 0.0 {
        return Err(DecadeError::validation("NMSE reference is all zero"));
    }
    Ok(num / den)
}

/// Peak signal-to-noise ratio in dB with data range = max(reference).
///
/// `pred == ref` returns the +infinity sentinel.
pub fn psnr(pred: &ArrayView3<f32>, reference: &ArrayView3<f32>) -> Result<f64> {
    check_dims(pred, reference)?;
    let range = reference.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(range > 0.0) {
        return Err(DecadeError::validation(format!(
            "PSNR data range {range} must be positive"
        )));
    }
    let n = pred.len() as f64;
    let mse: f64 = pred
        .iter()
        .zip(reference.iter())
        .map(|(&p, &r)| (p as f64 - r as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Gaussian SSIM window: 11 taps, sigma 1.5, normalized.
fn ssim_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut w = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, tap) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *tap = (-0.5 * (d / sigma).powi(2)).exp();
        sum += *tap;
    }
    for tap in w.iter_mut() {
        *tap /= sum;
    }
    w
}

fn ssim_slice(pred: &ArrayView2<f32>, reference: &ArrayView2<f32>, c1: f64, c2: f64) -> (f64, usize) {
    let w = ssim_window();
    let (ny, nx) = pred.dim();
    let mut total = 0.0f64;
    let mut count = 0usize;
    // Valid windows only: the 11x11 support must fit inside the slice.
    for oy in 0..=(ny - 11) {
        for ox in 0..=(nx - 11) {
            let mut mx = 0.0f64;
            let mut my = 0.0f64;
            let mut mxx = 0.0f64;
            let mut myy = 0.0f64;
            let mut mxy = 0.0f64;
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = w[dy] * w[dx];
                    let a = pred[[oy + dy, ox + dx]] as f64;
                    let b = reference[[oy + dy, ox + dx]] as f64;
                    mx += wt * a;
                    my += wt * b;
                    mxx += wt * a * a;
                    myy += wt * b * b;
                    mxy += wt * a * b;
                }
            }
            let vx = (mxx - mx * mx).max(0.0);
            let vy = (myy - my * my).max(0.0);
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    (total, count)
}

/// Mean structural similarity over all valid 11x11 windows of every Z slice.
///
/// Constants k1 = 0.01, k2 = 0.03 on the joint data range of both volumes.
pub fn ssim(pred: &ArrayView3<f32>, reference: &ArrayView3<f32>) -> Result<f64> {
    check_dims(pred, reference)?;
    let (_, ny, nx) = pred.dim();
    if ny < 11 || nx < 11 {
        return Err(DecadeError::validation(format!(
            "slice {ny}x{nx} smaller than the 11x11 SSIM window"
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in pred.iter().chain(reference.iter()) {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let range = hi - lo;
    if range == 0.0 {
        // Both volumes are one shared constant, a perfect match.
        return Ok(1.0);
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for z in 0..pred.dim().0 {
        let p = pred.index_axis(Axis(0), z);
        let r = reference.index_axis(Axis(0), z);
        let (t, c) = ssim_slice(&p, &r, c1, c2);
        total += t;
        count += c;
    }
    Ok(total / count as f64)
}

/// Normalized standard deviation over a region: population std / mean.
pub fn nstd(volume: &ArrayView3<f32>, mask: &Array3<bool>) -> Result<f64> {
    if volume.dim() != mask.dim() {
        return Err(DecadeError::validation("NSTD volume/mask dims differ"));
    }
    let vals: Vec<f64> = volume
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.is_empty() {
        return Err(DecadeError::validation("NSTD mask selects no voxels"));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    if !(mean > 0.0) {
        return Err(DecadeError::validation(format!("NSTD mean {mean} must be positive")));
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok(var.sqrt() / mean)
}

/// |pred - true| / true * 100.
pub fn percentage_error(pred_value: f64, true_value: f64) -> Result<f64> {
    if !(true_value > 0.0) {
        return Err(DecadeError::validation(format!(
            "percentage error needs a positive truth, got {true_value}"
        )));
    }
    Ok((pred_value - true_value).abs() / true_value * 100.0)
}

/// Mean over the myocardium mask divided by mean over the LV mask.
pub fn myo_blood_ratio(
    static_volume: &ArrayView3<f32>,
    myo_mask: &Array3<bool>,
    lv_mask: &Array3<bool>,
) -> Result<f64> {
    let mean_over = |mask: &Array3<bool>, name: &str| -> Result<f64> {
        if static_volume.dim() != mask.dim() {
            return Err(DecadeError::validation(format!("{name} mask dims differ")));
        }
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (&v, &m) in static_volume.iter().zip(mask.iter()) {
            if m {
                sum += v as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(DecadeError::validation(format!("{name} mask is empty")));
        }
        Ok(sum / n as f64)
    };
    let myo = mean_over(myo_mask, "myocardium")?;
    let lv = mean_over(lv_mask, "LV")?;
    if !(lv > 0.0) {
        return Err(DecadeError::validation(format!("LV mean {lv} must be positive")));
    }
    Ok(myo / lv)
}

/// Two-sided paired t-test on per-item differences.
///
/// Returns (t statistic, p value). Degenerate all-equal differences give
/// p = 1 when the mean difference is zero.
pub fn paired_t_test(diffs: &[f64]) -> Result<(f64, f64)> {
    let n = diffs.len();
    if n < 2 {
        return Err(DecadeError::validation("paired t-test needs at least 2 pairs"));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let t = mean / (var / n as f64).sqrt();
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map_err(|e| DecadeError::numerical(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

/// Per-frame metric row.
#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub frame: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Frame-wise scores plus an aggregate row; serializes to a fixed-column CSV.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub reference: String,
    pub rows: Vec<FrameMetrics>,
    pub aggregate: FrameMetrics,
}

impl MetricReport {
    pub fn mean_psnr_db(&self) -> f64 {
        self.aggregate.psnr_db
    }

    pub fn mean_ssim(&self) -> f64 {
        self.aggregate.ssim
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["version", "reference", "", ""])?;
        w.write_record([REPORT_VERSION.to_string(), self.reference.clone(), String::new(), String::new()])?;
        w.write_record(["frame", "psnr_db", "ssim", "nmse"])?;
        for row in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            w.write_record([
                row.frame.clone(),
                row.psnr_db.to_string(),
                row.ssim.to_string(),
                row.nmse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every frame of `pred` against `reference`; schedules must match.
pub fn compare_studies(
    pred: &DynamicStudy,
    reference: &DynamicStudy,
    label: &str,
) -> Result<MetricReport> {
    if pred.schedule != reference.schedule {
        return Err(DecadeError::validation("pred and reference schedules differ"));
    }
    if pred.frames.dim() != reference.frames.dim() {
        return Err(DecadeError::validation("pred and reference dims differ"));
    }
    let n = pred.n_frames();
    let mut rows = Vec::with_capacity(n);
    let mut sums = [0.0f64; 3];
    for f in 0..n {
        let p = pred.frames.index_axis(Axis(0), f);
        let r = reference.frames.index_axis(Axis(0), f);
        let row = FrameMetrics {
            frame: f.to_string(),
            psnr_db: psnr(&p, &r)?,
            ssim: ssim(&p, &r)?,
            nmse: nmse(&p, &r)?,
        };
        sums[0] += row.psnr_db;
        sums[1] += row.ssim;
        sums[2] += row.nmse;
        rows.push(row);
    }
    let aggregate = FrameMetrics {
        frame: "aggregate".to_string(),
        psnr_db: sums[0] / n as f64,
        ssim: sums[1] / n as f64,
        nmse: sums[2] / n as f64,
    };
    Ok(MetricReport { reference: label.to_string(), rows, aggregate })
}

/// Boolean mask from a label volume.
pub fn mask_of(labels: &Array3<u8>, code: u8) -> Array3<bool> {
    labels.mapv(|c| c == code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vol::Volume;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;

    fn rand_vol(seed: u64, dims: (usize, usize, usize)) -> Volume {
        let mut rng = crate::seed::rng(seed);
        Array3::from_shape_fn(dims, |_| rng.random_range(0.0..2.0))
    }

    #[test]
    fn nmse_identities() {
        let r = rand_vol(1, (4, 12, 12));
        assert_eq!(nmse(&r.view(), &r.view()).unwrap(), 0.0);
        let zero = Array3::zeros((4, 12, 12));
        assert_abs_diff_eq!(nmse(&zero.view(), &r.view()).unwrap(), 1.0, epsilon = 1e-12);
        let scaled = r.mapv(|v| v * 1.1);
        assert_abs_diff_eq!(nmse(&scaled.view(), &r.view()).unwrap(), 0.01, epsilon = 1e-6);
        assert!(nmse(&r.view(), &zero.view()).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_and_sentinel() {
        let r = rand_vol(2, (4, 12, 12));
        let mut p = r.clone();
        p[[0, 0, 0]] += 0.5;
        let range = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mse = 0.25 / r.len() as f64;
        let expect = 10.0 * (range * range / mse).log10();
        assert_abs_diff_eq!(psnr(&p.view(), &r.view()).unwrap(), expect, epsilon = 1e-9);
        assert_eq!(psnr(&r.view(), &r.view()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_twenty_db_when_mse_is_range_squared_over_100() {
        // Construct pred with constant offset d: MSE = d^2; choose d = range/10.
        let r = Array3::from_elem((1, 12, 12), 5.0f32);
        let p = r.mapv(|v| v + 0.5);
        assert_abs_diff_eq!(psnr(&p.view(), &r.view()).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identity_and_luminance_penalty() {
        let r = rand_vol(3, (2, 16, 16));
        assert_abs_diff_eq!(ssim(&r.view(), &r.view()).unwrap(), 1.0, epsilon = 1e-12);
        let shifted = r.mapv(|v| v + 3.0);
        let s = ssim(&shifted.view(), &r.view()).unwrap();
        assert!(s < 1.0, "luminance shift must cost similarity, got {s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = rand_vol(4, (2, 16, 16));
        let b = rand_vol(5, (2, 16, 16));
        let ab = ssim(&a.view(), &b.view()).unwrap();
        let ba = ssim(&b.view(), &a.view()).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn ssim_matches_independent_windowed_reimplementation() {
        // Unweighted reimplementation cross-check on a uniform-window variant
        // would drift; instead recompute with the same Gaussian window but an
        // independent code path: direct per-window accumulation in f64 over a
        // transposed layout.
        let a = rand_vol(6, (1, 13, 13));
        let b = rand_vol(7, (1, 13, 13));
        let got = ssim(&a.view(), &b.view()).unwrap();

        let w = ssim_window();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in a.iter().chain(b.iter()) {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        let range = hi - lo;
        let c1 = (0.01 * range).powi(2);
        let c2 = (0.03 * range).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..3 {
            for ox in 0..3 {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut cov = 0.0;
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = w[dy] * w[dx];
                        let p = a[[0, oy + dy, ox + dx]] as f64;
                        let r = b[[0, oy + dy, ox + dx]] as f64;
                        mx += wt * p;
                        my += wt * r;
                    }
                }
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = w[dy] * w[dx];
                        let p = a[[0, oy + dy, ox + dx]] as f64;
                        let r = b[[0, oy + dy, ox + dx]] as f64;
                        vx += wt * (p - mx) * (p - mx);
                        vy += wt * (r - my) * (r - my);
                        cov += wt * (p - mx) * (r - my);
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        assert_abs_diff_eq!(got, total / count as f64, epsilon = 1e-6);
    }

    #[test]
    fn ssim_rejects_volumes_below_window() {
        let a = rand_vol(8, (2, 8, 16));
        assert!(ssim(&a.view(), &a.view()).is_err());
    }

    #[test]
    fn nstd_hand_values() {
        let mut v = Array3::zeros((1, 11, 11));
        v[[0, 0, 0]] = 1.0;
        v[[0, 0, 1]] = 3.0;
        let mut mask = Array3::from_elem((1, 11, 11), false);
        mask[[0, 0, 0]] = true;
        mask[[0, 0, 1]] = true;
        // Population std of {1,3} is 1, mean 2.
        assert_abs_diff_eq!(nstd(&v.view(), &mask).unwrap(), 0.5, epsilon = 1e-12);
        let scaled = v.mapv(|x| x * 7.0);
        assert_abs_diff_eq!(nstd(&scaled.view(), &mask).unwrap(), 0.5, epsilon = 1e-12);
        let constant = Array3::from_elem((1, 11, 11), 4.0f32);
        let all = Array3::from_elem((1, 11, 11), true);
        assert_eq!(nstd(&constant.view(), &all).unwrap(), 0.0);
    }

    #[test]
    fn percentage_error_is_absolute() {
        assert_eq!(percentage_error(1.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(percentage_error(1.15, 1.0).unwrap(), 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(percentage_error(0.85, 1.0).unwrap(), 15.0, epsilon = 1e-12);
        assert!(percentage_error(1.0, 0.0).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        let mut v = Array3::zeros((1, 11, 11));
        let mut myo = Array3::from_elem((1, 11, 11), false);
        let mut lv = Array3::from_elem((1, 11, 11), false);
        v[[0, 1, 0]] = 2.0;
        myo[[0, 1, 0]] = true;
        v[[0, 2, 0]] = 1.0;
        lv[[0, 2, 0]] = true;
        assert_abs_diff_eq!(
            myo_blood_ratio(&v.view(), &myo, &lv).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        let empty = Array3::from_elem((1, 11, 11), false);
        assert!(myo_blood_ratio(&v.view(), &empty, &lv).is_err());
    }

    #[test]
    fn pointwise_metrics_are_permutation_invariant() {
        let a = rand_vol(9, (3, 11, 11));
        let b = rand_vol(10, (3, 11, 11));
        // Reverse C-order as a representative voxel permutation.
        let rev = |v: &Volume| {
            let mut flat: Vec<f32> = v.iter().cloned().collect();
            flat.reverse();
            Array3::from_shape_vec(v.dim(), flat).unwrap()
        };
        let (ar, br) = (rev(&a), rev(&b));
        assert_eq!(
            nmse(&a.view(), &b.view()).unwrap(),
            nmse(&ar.view(), &br.view()).unwrap()
        );
        assert_eq!(
            psnr(&a.view(), &b.view()).unwrap(),
            psnr(&ar.view(), &br.view()).unwrap()
        );
        // SSIM is window-based: check invariance under in-plane flips, which
        // preserve window structure.
        assert_abs_diff_eq!(
            ssim(&a.view(), &b.view()).unwrap(),
            ssim(&ar.view(), &br.view()).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn psnr_decreases_as_nmse_increases() {
        let r = rand_vol(11, (2, 12, 12));
        let mut prev_psnr = f64::INFINITY;
        let mut prev_nmse = 0.0;
        for i in 1..5 {
            let p = r.mapv(|v| v + 0.1 * i as f32);
            let cur_psnr = psnr(&p.view(), &r.view()).unwrap();
            let cur_nmse = nmse(&p.view(), &r.view()).unwrap();
            assert!(cur_nmse > prev_nmse);
            assert!(cur_psnr < prev_psnr);
            prev_psnr = cur_psnr;
            prev_nmse = cur_nmse;
        }
    }

    #[test]
    fn paired_t_detects_a_shift() {
        let mut rng = crate::seed::rng(12);
        let diffs: Vec<f64> = (0..40).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();
        let (t, p) = paired_t_test(&diffs).unwrap();
        assert!(t > 10.0);
        assert!(p < 1e-6);
        let zeros = vec![0.0; 10];
        assert_eq!(paired_t_test(&zeros).unwrap().1, 1.0);
    }

    #[test]
    fn report_roundtrips_to_csv() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricReport {
            reference: "clean".into(),
            rows: vec![FrameMetrics { frame: "0".into(), psnr_db: 30.0, ssim: 0.9, nmse: 0.1 }],
            aggregate: FrameMetrics {
                frame: "aggregate".into(),
                psnr_db: 30.0,
                ssim: 0.9,
                nmse: 0.1,
            },
        };
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("frame,psnr_db,ssim,nmse"));
        assert!(text.contains("aggregate"));
    }
}
