//! Volume helpers shared across the pipeline: percentile scaling, separable
//! Gaussian smoothing, and raw little-endian buffer codecs.
//!
//! Volumes are `Array3<f32>` indexed `[Z, Y, X]`; frame stacks are
//! `Array4<f32>` indexed `[F, Z, Y, X]`.

use crate::error::{DecadeError, Result};
use ndarray::{Array3, ArrayView3};

pub type Volume = Array3<f32>;

/// Linear-interpolation percentile of a value set, `p` in [0, 1].
///
/// Matches the common "linear" definition: rank h = (n-1)p, value
/// interpolated between the surrounding order statistics.
pub fn percentile(values: &[f32], p: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(DecadeError::validation("percentile of empty set"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(DecadeError::validation(format!("percentile p={p} outside [0,1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DecadeError::numerical("percentile input contains non-finite values"));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = (h - lo as f64) as f32;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Discrete Gaussian taps for standard deviation `sigma` (in samples),
/// truncated at radius ceil(3 sigma) and normalized to sum 1.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Separable Gaussian smoothing along Z, Y, X.
///
/// Boundary taps are renormalized over the in-bounds support, so constant
/// volumes are exactly invariant everywhere including edges.
pub fn smooth3(v: &ArrayView3<f32>, sigma: f64) -> Volume {
    let taps = gaussian_taps(sigma);
    let mut out = v.to_owned();
    for axis in 0..3 {
        out = smooth_axis(&out, axis, &taps);
    }
    out
}

fn smooth_axis(v: &Volume, axis: usize, taps: &[f64]) -> Volume {
    let dims = v.dim();
    let shape = [dims.0, dims.1, dims.2];
    let n = shape[axis] as i64;
    let radius = (taps.len() / 2) as i64;
    let mut out = Volume::zeros(dims);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let idx = [z as i64, y as i64, x as i64];
                let c = idx[axis];
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for (k, &w) in taps.iter().enumerate() {
                    let o = c + (k as i64 - radius);
                    if o < 0 || o >= n {
                        continue;
                    }
                    let mut j = idx;
                    j[axis] = o;
                    acc += w * v[[j[0] as usize, j[1] as usize, j[2] as usize]] as f64;
                    wsum += w;
                }
                out[[z, y, x]] = (acc / wsum) as f32;
            }
        }
    }
    out
}

/// Encodes f32 values as little-endian bytes.
pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes little-endian f32 bytes; length must be a multiple of 4.
pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(DecadeError::format(format!(
            "raw f32 payload length {} not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [0.0f32, 1.0, 2.0, 3.0];
        // h = 3 * 0.5 = 1.5 between order stats 1 and 2
        assert_abs_diff_eq!(percentile(&v, 0.5).unwrap(), 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(percentile(&v, 0.0).unwrap(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(percentile(&v, 1.0).unwrap(), 3.0, epsilon = 1e-7);
        // h = 3 * 0.995 = 2.985
        assert_abs_diff_eq!(percentile(&v, 0.995).unwrap(), 2.985, epsilon = 1e-6);
    }

    #[test]
    fn percentile_rejects_bad_input() {
        assert!(percentile(&[], 0.5).is_err());
        assert!(percentile(&[1.0], 1.5).is_err());
        assert!(percentile(&[f32::NAN], 0.5).is_err());
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let t = gaussian_taps(1.0);
        assert_eq!(t.len(), 7);
        assert_abs_diff_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..t.len() / 2 {
            assert_abs_diff_eq!(t[i], t[t.len() - 1 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn smoothing_preserves_constants_exactly_including_edges() {
        let v = Array3::from_elem((5, 6, 7), 3.25f32);
        let s = smooth3(&v.view(), 1.0);
        for &x in s.iter() {
            assert_abs_diff_eq!(x, 3.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn smoothing_preserves_mass_ordering() {
        // A point source spreads but the peak stays at the source voxel.
        let mut v = Array3::zeros((9, 9, 9));
        v[[4, 4, 4]] = 1.0f32;
        let s = smooth3(&v.view(), 1.0);
        let peak = s
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, (4, 4, 4));
        assert!(s[[4, 4, 4]] < 1.0);
        assert!(s[[4, 4, 5]] > 0.0);
    }

    #[test]
    fn f32_roundtrip_is_exact() {
        let v = vec![0.0f32, -1.5, 3.25e-7, f32::MAX];
        let b = f32_to_le_bytes(&v);
        assert_eq!(f32_from_le_bytes(&b).unwrap(), v);
        assert!(f32_from_le_bytes(&b[..5]).is_err());
    }
}
