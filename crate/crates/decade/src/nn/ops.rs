//! Differentiable primitives over `[C, Z, Y, X]` feature maps.
//!
//! Convolutions run one of three code paths: a GEMM over an im2col matrix
//! (general case), a plain GEMM (pointwise kernels), or a direct
//! shift-and-accumulate loop for odd stride-1 same-padding kernels, which is
//! the hot shape during sampling. Backward passes take `Option<&mut Grads>`;
//! `None` computes only the input gradient, the mode the sampler uses, and
//! skips every weight-gradient GEMM.

use super::param::{Grads, Init, ParamId, ParamStore};
use crate::error::Result;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, Order};

/// Feature map `[C, Z, Y, X]`.
pub type Feat = Array4<f32>;

pub(crate) fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Kernel geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn k3s1p1(c_in: usize, c_out: usize) -> Self {
        ConvSpec { c_in, c_out, kernel: [3; 3], stride: [1; 3], pad: [1; 3] }
    }

    pub fn k1(c_in: usize, c_out: usize) -> Self {
        ConvSpec { c_in, c_out, kernel: [1; 3], stride: [1; 3], pad: [0; 3] }
    }

    /// In-plane 3x3 with no depth mixing.
    pub fn k3s1p1_2d(c_in: usize, c_out: usize) -> Self {
        ConvSpec { c_in, c_out, kernel: [1, 3, 3], stride: [1; 3], pad: [0, 1, 1] }
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        let mut o = [0; 3];
        for i in 0..3 {
            let padded = d[i] + 2 * self.pad[i];
            assert!(padded >= self.kernel[i], "input {d:?} too small for {self:?}");
            o[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        o
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Stride-1 odd kernel whose padding preserves dimensions.
    fn is_same_shape(&self) -> bool {
        self.stride == [1; 3]
            && (0..3).all(|i| self.kernel[i] % 2 == 1 && self.pad[i] == self.kernel[i] / 2)
            && self.kernel != [1; 3]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

fn im2col(x: &Feat, spec: &ConvSpec) -> Array2<f32> {
    let (c_in, zd, yd, xd) = x.dim();
    let [oz, oy, ox] = spec.out_dims([zd, yd, xd]);
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.pad;
    let n = oz * oy * ox;
    let mut col = Array2::zeros((c_in * spec.kernel_len(), n));
    let xs = x.as_slice().expect("contiguous feature map");
    let cs = col.as_slice_mut().unwrap();
    let mut r = 0;
    for ci in 0..c_in {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = &mut cs[r * n..(r + 1) * n];
                    let mut q = 0;
                    for zo in 0..oz {
                        let zi = (zo * sz + dz) as isize - pz as isize;
                        if zi < 0 || zi >= zd as isize {
                            q += oy * ox;
                            continue;
                        }
                        for yo in 0..oy {
                            let yi = (yo * sy + dy) as isize - py as isize;
                            if yi < 0 || yi >= yd as isize {
                                q += ox;
                                continue;
                            }
                            let base = ((ci * zd + zi as usize) * yd + yi as usize) * xd;
                            for xo in 0..ox {
                                let xi = (xo * sx + dx) as isize - px as isize;
                                if xi >= 0 && xi < xd as isize {
                                    row[q] = xs[base + xi as usize];
                                }
                                q += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    col
}

fn col2im(dcol: &ArrayView2<f32>, in_dims: (usize, usize, usize, usize), spec: &ConvSpec) -> Feat {
    let (c_in, zd, yd, xd) = in_dims;
    let [oz, oy, ox] = spec.out_dims([zd, yd, xd]);
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.pad;
    let n = oz * oy * ox;
    let mut dx_map = Feat::zeros(in_dims);
    let out = dx_map.as_slice_mut().unwrap();
    let dc = dcol.as_standard_layout();
    let dc = dc.as_slice().unwrap();
    let mut r = 0;
    for ci in 0..c_in {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = &dc[r * n..(r + 1) * n];
                    let mut q = 0;
                    for zo in 0..oz {
                        let zi = (zo * sz + dz) as isize - pz as isize;
                        if zi < 0 || zi >= zd as isize {
                            q += oy * ox;
                            continue;
                        }
                        for yo in 0..oy {
                            let yi = (yo * sy + dy) as isize - py as isize;
                            if yi < 0 || yi >= yd as isize {
                                q += ox;
                                continue;
                            }
                            let base = ((ci * zd + zi as usize) * yd + yi as usize) * xd;
                            for xo in 0..ox {
                                let xi = (xo * sx + dx) as isize - px as isize;
                                if xi >= 0 && xi < xd as isize {
                                    out[base + xi as usize] += row[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    dx_map
}

/// Direct shift-and-accumulate convolution for same-shape specs. `w` is
/// `[c_out, c_in, kz, ky, kx]` in C order.
///
/// Both the input copy and the accumulator live in padded geometry, which
/// turns every kernel-tap contribution into a single full-volume AXPY at a
/// constant flat offset: margin cells accumulate garbage that the final
/// interior extraction never reads. Slack on both ends of the input buffer
/// absorbs the offset under- and overruns at the volume boundaries.
fn conv_same_direct(x: &Feat, w: &[f32], bias: Option<&[f32]>, spec: &ConvSpec) -> Feat {
    let (c_in, zd, yd, xd) = x.dim();
    debug_assert_eq!(c_in, spec.c_in);
    let [kz, ky, kx] = spec.kernel;
    let [pz, py, px] = spec.pad;
    let (pzd, pyd, pxd) = (zd + 2 * pz, yd + 2 * py, xd + 2 * px);
    let cstride = pzd * pyd * pxd;
    let slack = pz * pyd * pxd + py * pxd + px;
    let mut buf = vec![0.0f32; slack + c_in * cstride + slack];
    {
        let xs = x.as_slice().expect("contiguous feature map");
        for ci in 0..c_in {
            for z in 0..zd {
                for y in 0..yd {
                    let src = (ci * zd + z) * yd * xd + y * xd;
                    let dst = slack + ci * cstride + (z + pz) * pyd * pxd + (y + py) * pxd + px;
                    buf[dst..dst + xd].copy_from_slice(&xs[src..src + xd]);
                }
            }
        }
    }

    let run = zd * pyd * pxd;
    let mut acc = vec![0.0f32; spec.c_out * run];
    for co in 0..spec.c_out {
        let o_base = co * run;
        if let Some(b) = bias {
            acc[o_base..o_base + run].fill(b[co]);
        }
        for ci in 0..c_in {
            for dz in 0..kz {
                // Accumulator index (z, y', x') reads input index
                // (z + dz, y' + dy - py, x' + dx - px) in padded
                // coordinates; the flat offset is constant per tap.
                let plane = (slack + ci * cstride + dz * pyd * pxd) as isize;
                let wbase = ((co * c_in + ci) * kz + dz) * ky * kx;
                let ws = &w[wbase..wbase + ky * kx];
                if ws.iter().all(|&wt| wt == 0.0) {
                    continue;
                }
                let dst = &mut acc[o_base..o_base + run];
                if ky == 3 && kx == 3 {
                    // One fused pass over the nine in-plane taps keeps the
                    // store traffic per multiply at a ninth of the tap-at-a-
                    // time form.
                    let top = (plane - (py * pxd + px) as isize) as usize;
                    let s = [
                        &buf[top..top + run],
                        &buf[top + 1..top + 1 + run],
                        &buf[top + 2..top + 2 + run],
                        &buf[top + pxd..top + pxd + run],
                        &buf[top + pxd + 1..top + pxd + 1 + run],
                        &buf[top + pxd + 2..top + pxd + 2 + run],
                        &buf[top + 2 * pxd..top + 2 * pxd + run],
                        &buf[top + 2 * pxd + 1..top + 2 * pxd + 1 + run],
                        &buf[top + 2 * pxd + 2..top + 2 * pxd + 2 + run],
                    ];
                    for i in 0..run {
                        dst[i] += ws[0] * s[0][i]
                            + ws[1] * s[1][i]
                            + ws[2] * s[2][i]
                            + ws[3] * s[3][i]
                            + ws[4] * s[4][i]
                            + ws[5] * s[5][i]
                            + ws[6] * s[6][i]
                            + ws[7] * s[7][i]
                            + ws[8] * s[8][i];
                    }
                } else {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            let wt = ws[dy * kx + dx];
                            if wt == 0.0 {
                                continue;
                            }
                            let src0 = plane
                                + (dy as isize - py as isize) * pxd as isize
                                + (dx as isize - px as isize);
                            let src = &buf[src0 as usize..src0 as usize + run];
                            for i in 0..run {
                                dst[i] += wt * src[i];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = Feat::zeros((spec.c_out, zd, yd, xd));
    let os = out.as_slice_mut().unwrap();
    for co in 0..spec.c_out {
        for z in 0..zd {
            for y in 0..yd {
                let src = co * run + z * pyd * pxd + (y + py) * pxd + px;
                let dst = (co * zd + z) * yd * xd + y * xd;
                os[dst..dst + xd].copy_from_slice(&acc[src..src + xd]);
            }
        }
    }
    out
}

/// Flips a same-shape kernel for the input-gradient pass:
/// `w_t[ci, co, k - 1 - d] = w[co, ci, d]`.
fn flip_transpose_kernel(w: &[f32], spec: &ConvSpec) -> Vec<f32> {
    let [kz, ky, kx] = spec.kernel;
    let (ci_n, co_n) = (spec.c_in, spec.c_out);
    let mut out = vec![0.0f32; w.len()];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let src = (((co * ci_n + ci) * kz + dz) * ky + dy) * kx + dx;
                        let dst = (((ci * co_n + co) * kz + (kz - 1 - dz)) * ky + (ky - 1 - dy))
                            * kx
                            + (kx - 1 - dx);
                        out[dst] = w[src];
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient of a same-shape convolution: the correlation of the
/// padded input with the output gradient at every kernel-tap offset.
///
/// Both operands sit in the forward pass's padded geometry. The output
/// gradient keeps zeros in its margin cells, so products that would read
/// out-of-range input vanish without branching, and each tap reduces to one
/// dot product at a constant flat offset. Reductions are split over lanes to
/// break the serial dependency per accumulator.
fn conv_same_dw(x: &Feat, dy: &Feat, spec: &ConvSpec) -> Vec<f32> {
    const L: usize = 16;
    let (c_in, zd, yd, xd) = x.dim();
    let (c_out, ozd, oyd, oxd) = dy.dim();
    debug_assert_eq!((ozd, oyd, oxd), (zd, yd, xd));
    debug_assert_eq!(c_in, spec.c_in);
    debug_assert_eq!(c_out, spec.c_out);
    let [kz, ky, kx] = spec.kernel;
    let [pz, py, px] = spec.pad;
    let (pzd, pyd, pxd) = (zd + 2 * pz, yd + 2 * py, xd + 2 * px);
    let cstride = pzd * pyd * pxd;
    let slack = pz * pyd * pxd + py * pxd + px;
    let mut buf = vec![0.0f32; slack + c_in * cstride + slack];
    {
        let xs = x.as_slice().expect("contiguous feature map");
        for ci in 0..c_in {
            for z in 0..zd {
                for y in 0..yd {
                    let src = (ci * zd + z) * yd * xd + y * xd;
                    let dst = slack + ci * cstride + (z + pz) * pyd * pxd + (y + py) * pxd + px;
                    buf[dst..dst + xd].copy_from_slice(&xs[src..src + xd]);
                }
            }
        }
    }
    let run = zd * pyd * pxd;
    let mut dyp = vec![0.0f32; c_out * run];
    {
        let ds = dy.as_slice().expect("contiguous gradient");
        for co in 0..c_out {
            for z in 0..zd {
                for y in 0..yd {
                    let src = (co * zd + z) * yd * xd + y * xd;
                    let dst = co * run + z * pyd * pxd + (y + py) * pxd + px;
                    dyp[dst..dst + xd].copy_from_slice(&ds[src..src + xd]);
                }
            }
        }
    }

    let mut dw = vec![0.0f32; c_out * c_in * kz * ky * kx];
    for co in 0..c_out {
        let d = &dyp[co * run..(co + 1) * run];
        for ci in 0..c_in {
            for dz in 0..kz {
                let plane = (slack + ci * cstride + dz * pyd * pxd) as isize;
                let wbase = ((co * c_in + ci) * kz + dz) * ky * kx;
                if ky == 3 && kx == 3 {
                    let top = (plane - (py * pxd + px) as isize) as usize;
                    let s = [
                        &buf[top..top + run],
                        &buf[top + 1..top + 1 + run],
                        &buf[top + 2..top + 2 + run],
                        &buf[top + pxd..top + pxd + run],
                        &buf[top + pxd + 1..top + pxd + 1 + run],
                        &buf[top + pxd + 2..top + pxd + 2 + run],
                        &buf[top + 2 * pxd..top + 2 * pxd + run],
                        &buf[top + 2 * pxd + 1..top + 2 * pxd + 1 + run],
                        &buf[top + 2 * pxd + 2..top + 2 * pxd + 2 + run],
                    ];
                    // Nine named lane accumulators, never borrowed, and
                    // per-block slices cut to exactly L: the inner loop
                    // bound matches every slice length, so it compiles to
                    // branch-free vector code.
                    let mut a0 = [0.0f32; L];
                    let mut a1 = [0.0f32; L];
                    let mut a2 = [0.0f32; L];
                    let mut a3 = [0.0f32; L];
                    let mut a4 = [0.0f32; L];
                    let mut a5 = [0.0f32; L];
                    let mut a6 = [0.0f32; L];
                    let mut a7 = [0.0f32; L];
                    let mut a8 = [0.0f32; L];
                    let blocks = run / L;
                    for blk in 0..blocks {
                        let o = blk * L;
                        let db = &d[o..o + L];
                        let b0 = &s[0][o..o + L];
                        let b1 = &s[1][o..o + L];
                        let b2 = &s[2][o..o + L];
                        let b3 = &s[3][o..o + L];
                        let b4 = &s[4][o..o + L];
                        let b5 = &s[5][o..o + L];
                        let b6 = &s[6][o..o + L];
                        let b7 = &s[7][o..o + L];
                        let b8 = &s[8][o..o + L];
                        for k in 0..L {
                            let dk = db[k];
                            a0[k] += dk * b0[k];
                            a1[k] += dk * b1[k];
                            a2[k] += dk * b2[k];
                            a3[k] += dk * b3[k];
                            a4[k] += dk * b4[k];
                            a5[k] += dk * b5[k];
                            a6[k] += dk * b6[k];
                            a7[k] += dk * b7[k];
                            a8[k] += dk * b8[k];
                        }
                    }
                    let mut tail = [0.0f32; 9];
                    for i in blocks * L..run {
                        for (j, sj) in s.iter().enumerate() {
                            tail[j] += d[i] * sj[i];
                        }
                    }
                    for (j, a) in [a0, a1, a2, a3, a4, a5, a6, a7, a8].iter().enumerate() {
                        dw[wbase + j] = a.iter().sum::<f32>() + tail[j];
                    }
                } else {
                    for dyk in 0..ky {
                        for dxk in 0..kx {
                            let src0 = plane
                                + (dyk as isize - py as isize) * pxd as isize
                                + (dxk as isize - px as isize);
                            let sj = &buf[src0 as usize..src0 as usize + run];
                            let mut acc = [0.0f32; L];
                            let blocks = run / L;
                            for blk in 0..blocks {
                                let o = blk * L;
                                for k in 0..L {
                                    acc[k] += d[o + k] * sj[o + k];
                                }
                            }
                            for i in blocks * L..run {
                                acc[0] += d[i] * sj[i];
                            }
                            dw[wbase + dyk * kx + dxk] = acc.iter().sum();
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Convolution layer over feature maps.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv3d {
    pub fn register(store: &mut ParamStore, name: &str, spec: ConvSpec, zero_init: bool) -> Result<Self> {
        let fan_in = spec.c_in * spec.kernel_len();
        let init = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        let w = store.register(
            &format!("{name}.w"),
            &[spec.c_out, spec.c_in, spec.kernel[0], spec.kernel[1], spec.kernel[2]],
            init,
        )?;
        let b = store.register(&format!("{name}.b"), &[spec.c_out], Init::Zeros)?;
        Ok(Conv3d { w, b, spec })
    }

    pub fn forward(&self, store: &ParamStore, x: &Feat) -> Feat {
        let w = store.data(self.w);
        let b = store.data(self.b);
        let (c_in, zd, yd, xd) = x.dim();
        assert_eq!(c_in, self.spec.c_in, "channel mismatch");
        let [oz, oy, ox] = self.spec.out_dims([zd, yd, xd]);
        if self.spec.is_same_shape() {
            return conv_same_direct(x, w, Some(b), &self.spec);
        }
        let n = oz * oy * ox;
        let k = self.spec.c_in * self.spec.kernel_len();
        let w2 = ArrayView2::from_shape((self.spec.c_out, k), w).unwrap();
        let mut y2 = if self.spec.is_pointwise() {
            let x2 = ArrayView2::from_shape((c_in, n), x.as_slice().unwrap()).unwrap();
            matmul(&w2, &x2)
        } else {
            let col = im2col(x, &self.spec);
            matmul(&w2, &col.view())
        };
        for (mut row, &bv) in y2.rows_mut().into_iter().zip(b) {
            row.mapv_inplace(|v| v + bv);
        }
        y2.into_shape_with_order(((self.spec.c_out, oz, oy, ox), Order::RowMajor))
            .unwrap()
    }

    /// Input gradient; weight/bias gradients accumulate only when `grads`
    /// is provided.
    pub fn backward(&self, store: &ParamStore, x: &Feat, dy: &Feat, grads: Option<&mut Grads>) -> Feat {
        let w = store.data(self.w);
        let (c_out, oz, oy, ox) = dy.dim();
        assert_eq!(c_out, self.spec.c_out);
        let n = oz * oy * ox;
        let k = self.spec.c_in * self.spec.kernel_len();
        let dy2 = ArrayView2::from_shape((c_out, n), dy.as_slice().unwrap()).unwrap();

        if let Some(grads) = grads {
            if self.spec.is_pointwise() {
                let (c_in, zd, yd, xd) = x.dim();
                let x2 = ArrayView2::from_shape((c_in, zd * yd * xd), x.as_slice().unwrap()).unwrap();
                let dw2 = matmul(&dy2, &x2.t());
                grads.accumulate(self.w, dw2.as_slice().unwrap());
            } else if self.spec.is_same_shape() {
                grads.accumulate(self.w, &conv_same_dw(x, dy, &self.spec));
            } else {
                let col = im2col(x, &self.spec);
                let dw2 = matmul(&dy2, &col.t());
                grads.accumulate(self.w, dw2.as_slice().unwrap());
            }
            let db: Vec<f32> = dy2.rows().into_iter().map(|r| r.sum()).collect();
            grads.accumulate(self.b, &db);
        }

        if self.spec.is_same_shape() {
            let wt = flip_transpose_kernel(w, &self.spec);
            let t_spec = ConvSpec {
                c_in: self.spec.c_out,
                c_out: self.spec.c_in,
                ..self.spec
            };
            return conv_same_direct(dy, &wt, None, &t_spec);
        }
        let w2 = ArrayView2::from_shape((c_out, k), w).unwrap();
        if self.spec.is_pointwise() {
            let dx2 = matmul(&w2.t(), &dy2);
            let (c_in, zd, yd, xd) = x.dim();
            return dx2
                .into_shape_with_order(((c_in, zd, yd, xd), Order::RowMajor))
                .unwrap();
        }
        let dcol = matmul(&w2.t(), &dy2);
        col2im(&dcol.view(), x.dim(), &self.spec)
    }
}

/// Channel group count: largest of {4, 2, 1} dividing `c`.
pub fn group_count(c: usize) -> usize {
    if c % 4 == 0 {
        4
    } else if c % 2 == 0 {
        2
    } else {
        1
    }
}

const GN_EPS: f64 = 1e-5;

/// Sum and sum of squares in f64, split over independent accumulator lanes
/// so the reduction is not one serial dependency chain.
fn sum_and_sq(xs: &[f32]) -> (f64, f64) {
    let mut sum = [0.0f64; 8];
    let mut sq = [0.0f64; 8];
    let mut it = xs.chunks_exact(8);
    for ch in &mut it {
        for k in 0..8 {
            let v = ch[k] as f64;
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    for &v in it.remainder() {
        let v = v as f64;
        sum[0] += v;
        sq[0] += v * v;
    }
    (sum.iter().sum(), sq.iter().sum())
}

/// Dot product and plain sum of `a` in f64, lane-split like [`sum_and_sq`].
fn dot_and_sum(a: &[f32], b: &[f32]) -> (f64, f64) {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = [0.0f64; 8];
    let mut sum = [0.0f64; 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for k in 0..8 {
            let va = ca[k] as f64;
            dot[k] += va * cb[k] as f64;
            sum[k] += va;
        }
    }
    for (&va, &vb) in ia.remainder().iter().zip(ib.remainder()) {
        dot[0] += va as f64 * vb as f64;
        sum[0] += va as f64;
    }
    (dot.iter().sum(), sum.iter().sum())
}

/// Values saved by the normalization forward pass for its backward.
#[derive(Debug, Clone)]
pub struct GnCtx {
    pub xhat: Feat,
    inv_std: Vec<f32>,
}

/// Group normalization with affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub c: usize,
}

impl GroupNorm {
    pub fn register(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.g"), &[c], Init::Ones)?;
        let beta = store.register(&format!("{name}.be"), &[c], Init::Zeros)?;
        Ok(GroupNorm { gamma, beta, groups: group_count(c), c })
    }

    pub fn forward(&self, store: &ParamStore, x: &Feat) -> (Feat, GnCtx) {
        let (c, zd, yd, xd) = x.dim();
        assert_eq!(c, self.c);
        let spatial = zd * yd * xd;
        let per = c / self.groups;
        let xs = x.as_slice().unwrap();
        let gamma = store.data(self.gamma);
        let beta = store.data(self.beta);
        let mut xhat = Feat::zeros(x.dim());
        let hs = xhat.as_slice_mut().unwrap();
        let mut y = Feat::zeros(x.dim());
        let ys = y.as_slice_mut().unwrap();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let lo = g * per * spatial;
            let hi = lo + per * spatial;
            let n = (hi - lo) as f64;
            let (sum, sq) = sum_and_sq(&xs[lo..hi]);
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(istd as f32);
            let (mean, istd) = (mean as f32, istd as f32);
            for ch in g * per..(g + 1) * per {
                let clo = ch * spatial;
                let (gm, bt) = (gamma[ch], beta[ch]);
                for i in clo..clo + spatial {
                    let h = (xs[i] - mean) * istd;
                    hs[i] = h;
                    ys[i] = gm * h + bt;
                }
            }
        }
        (y, GnCtx { xhat, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, ctx: &GnCtx, dy: &Feat, grads: Option<&mut Grads>) -> Feat {
        let (c, zd, yd, xd) = dy.dim();
        let spatial = zd * yd * xd;
        let per = c / self.groups;
        let gamma = store.data(self.gamma);
        let hs = ctx.xhat.as_slice().unwrap();
        let ds = dy.as_slice().unwrap();

        // Per-channel reductions feed both the weight gradients and the
        // group means of ghat = gamma * dy, so they are computed once.
        let mut sg = vec![0.0f64; c];
        let mut sb = vec![0.0f64; c];
        for ch in 0..c {
            let lo = ch * spatial;
            let (dot, sum) = dot_and_sum(&ds[lo..lo + spatial], &hs[lo..lo + spatial]);
            sg[ch] = dot;
            sb[ch] = sum;
        }
        if let Some(grads) = grads {
            let dg: Vec<f32> = sg.iter().map(|&v| v as f32).collect();
            let db: Vec<f32> = sb.iter().map(|&v| v as f32).collect();
            grads.accumulate(self.gamma, &dg);
            grads.accumulate(self.beta, &db);
        }

        let mut dx_map = Feat::zeros(dy.dim());
        let os = dx_map.as_slice_mut().unwrap();
        for g in 0..self.groups {
            let n = (per * spatial) as f64;
            let mut m_g = 0.0f64;
            let mut m_gh = 0.0f64;
            for ch in g * per..(g + 1) * per {
                m_g += gamma[ch] as f64 * sb[ch];
                m_gh += gamma[ch] as f64 * sg[ch];
            }
            let m_g = (m_g / n) as f32;
            let m_gh = (m_gh / n) as f32;
            let istd = ctx.inv_std[g];
            for ch in g * per..(g + 1) * per {
                let clo = ch * spatial;
                let gm = gamma[ch];
                for i in clo..clo + spatial {
                    os[i] = istd * (gm * ds[i] - m_g - hs[i] * m_gh);
                }
            }
        }
        dx_map
    }
}

/// Exponent-field shift spliced with a polynomial. Rounding picks the power
/// of two, two-constant reduction keeps the residual exact to f32 precision,
/// and the degree-6 expansion on |g| <= ln2/2 stays within a few f32 ulps of
/// libm; the loop body vectorizes, unlike libm exp.
#[inline]
fn fast_exp(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-80.0, 88.0);
    let i = (x * std::f32::consts::LOG2_E).round();
    let g = (x - i * LN2_HI) - i * LN2_LO;
    let p = 1.0
        + g * (1.0
            + g * (0.5
                + g * (0.166_666_67
                    + g * (0.041_666_668 + g * (0.008_333_334 + g * 0.001_388_889)))));
    let scale = f32::from_bits((((i as i32) + 127) << 23) as u32);
    scale * p
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

/// x * sigmoid(x), elementwise.
pub fn silu(x: &Feat) -> Feat {
    x.mapv(|v| v * sigmoid(v))
}

/// Chain rule through silu given its input.
pub fn silu_backward(x: &Feat, dy: &Feat) -> Feat {
    let mut dx_map = dy.clone();
    dx_map.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx_map
}

pub fn silu_vec(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Dense layer on flat vectors; weight is `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, zero_init: bool) -> Result<Self> {
        let init = if zero_init { Init::Zeros } else { Init::FanIn(d_in) };
        let w = store.register(&format!("{name}.w"), &[d_out, d_in], init)?;
        let b = store.register(&format!("{name}.b"), &[d_out], Init::Zeros)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.d_in);
        let w = store.data(self.w);
        let b = store.data(self.b);
        (0..self.d_out)
            .map(|o| {
                let row = &w[o * self.d_in..(o + 1) * self.d_in];
                let dot: f32 = row.iter().zip(x).map(|(&wv, &xv)| wv * xv).sum();
                dot + b[o]
            })
            .collect()
    }

    pub fn backward(&self, store: &ParamStore, x: &[f32], dy: &[f32], grads: Option<&mut Grads>) -> Vec<f32> {
        assert_eq!(dy.len(), self.d_out);
        let w = store.data(self.w);
        if let Some(grads) = grads {
            let mut dw = vec![0.0f32; self.d_out * self.d_in];
            for o in 0..self.d_out {
                for i in 0..self.d_in {
                    dw[o * self.d_in + i] = dy[o] * x[i];
                }
            }
            grads.accumulate(self.w, &dw);
            grads.accumulate(self.b, dy);
        }
        let mut dx = vec![0.0f32; self.d_in];
        for o in 0..self.d_out {
            let row = &w[o * self.d_in..(o + 1) * self.d_in];
            for i in 0..self.d_in {
                dx[i] += dy[o] * row[i];
            }
        }
        dx
    }
}

/// Nearest-neighbor upsampling by integer factors.
pub fn upsample_nearest(x: &Feat, f: [usize; 3]) -> Feat {
    let (c, zd, yd, xd) = x.dim();
    let mut out = Feat::zeros((c, zd * f[0], yd * f[1], xd * f[2]));
    for ch in 0..c {
        for z in 0..zd * f[0] {
            for y in 0..yd * f[1] {
                for xi in 0..xd * f[2] {
                    out[[ch, z, y, xi]] = x[[ch, z / f[0], y / f[1], xi / f[2]]];
                }
            }
        }
    }
    out
}

/// Adjoint of nearest upsampling: sum-pool over each replicated block.
pub fn upsample_nearest_backward(dy: &Feat, f: [usize; 3]) -> Feat {
    let (c, zd, yd, xd) = dy.dim();
    assert!(zd % f[0] == 0 && yd % f[1] == 0 && xd % f[2] == 0);
    let mut out = Feat::zeros((c, zd / f[0], yd / f[1], xd / f[2]));
    for ch in 0..c {
        for z in 0..zd {
            for y in 0..yd {
                for xi in 0..xd {
                    out[[ch, z / f[0], y / f[1], xi / f[2]]] += dy[[ch, z, y, xi]];
                }
            }
        }
    }
    out
}

/// Adds one scalar per channel; the time-embedding injection.
pub fn add_channel_bias(x: &mut Feat, bias: &[f32]) {
    let (c, ..) = x.dim();
    assert_eq!(c, bias.len());
    for (mut plane, &b) in x.outer_iter_mut().zip(bias) {
        plane.mapv_inplace(|v| v + b);
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias vector.
pub fn channel_bias_grad(dy: &Feat) -> Vec<f32> {
    dy.outer_iter().map(|plane| plane.sum()).collect()
}

/// Sinusoidal step-embedding table `[n_steps, dim]`; row t-1 encodes step t.
pub fn sinusoidal_table(n_steps: usize, dim: usize) -> Array2<f32> {
    assert!(dim >= 4 && dim % 2 == 0, "embedding dim must be even and >= 4");
    let half = dim / 2;
    let mut table = Array2::zeros((n_steps, dim));
    for t in 1..=n_steps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
            let arg = t as f64 * freq;
            table[[t - 1, i]] = arg.sin() as f32;
            table[[t - 1, half + i]] = arg.cos() as f32;
        }
    }
    table
}

/// Saved activations of one attention forward.
#[derive(Debug, Clone)]
pub struct AttnCtx {
    gn: GnCtx,
    h: Feat,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    p: Array2<f32>,
    o: Feat,
}

/// Single-head self-attention over all spatial positions, with a residual
/// connection and zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: GroupNorm,
    pub q: Conv3d,
    pub k: Conv3d,
    pub v: Conv3d,
    pub proj: Conv3d,
    pub c: usize,
}

impl Attention {
    pub fn register(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Attention {
            norm: GroupNorm::register(store, &format!("{name}.norm"), c)?,
            q: Conv3d::register(store, &format!("{name}.q"), ConvSpec::k1(c, c), false)?,
            k: Conv3d::register(store, &format!("{name}.k"), ConvSpec::k1(c, c), false)?,
            v: Conv3d::register(store, &format!("{name}.v"), ConvSpec::k1(c, c), false)?,
            proj: Conv3d::register(store, &format!("{name}.proj"), ConvSpec::k1(c, c), true)?,
            c,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Feat) -> (Feat, AttnCtx) {
        let (c, zd, yd, xd) = x.dim();
        let n = zd * yd * xd;
        let (h, gn) = self.norm.forward(store, x);
        let qf = self.q.forward(store, &h);
        let kf = self.k.forward(store, &h);
        let vf = self.v.forward(store, &h);
        let as2 = |f: &Feat| {
            Array2::from_shape_vec((c, n), f.as_slice().unwrap().to_vec()).unwrap()
        };
        let (q2, k2, v2) = (as2(&qf), as2(&kf), as2(&vf));
        let scale = 1.0 / (c as f32).sqrt();
        let mut scores = matmul(&q2.t(), &k2.view());
        scores.mapv_inplace(|v| v * scale);
        // Row softmax in f64 for stability.
        let mut p = scores;
        for mut row in p.rows_mut() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v as f64;
            }
            let inv = (1.0 / sum) as f32;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let o2 = matmul(&v2.view(), &p.t());
        let o = o2
            .into_shape_with_order(((c, zd, yd, xd), Order::RowMajor))
            .unwrap();
        let projected = self.proj.forward(store, &o);
        let y = x + &projected;
        (y, AttnCtx { gn, h, q: q2, k: k2, v: v2, p, o })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        ctx: &AttnCtx,
        dy: &Feat,
        mut grads: Option<&mut Grads>,
    ) -> Feat {
        let (c, zd, yd, xd) = dy.dim();
        let n = zd * yd * xd;
        let d_o = self.proj.backward(store, &ctx.o, dy, grads.as_deref_mut());
        let do2 = Array2::from_shape_vec((c, n), d_o.as_slice().unwrap().to_vec()).unwrap();
        // o = v p^T.
        let dv2 = matmul(&do2.view(), &ctx.p.view());
        let dp = matmul(&do2.t(), &ctx.v.view());
        // Softmax rows: ds = p * (dp - rowsum(dp * p)).
        let mut ds = dp;
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(ctx.p.rows()) {
            let dot: f64 = ds_row
                .iter()
                .zip(p_row.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            for (d, &pv) in ds_row.iter_mut().zip(p_row.iter()) {
                *d = pv * (*d - dot as f32);
            }
        }
        let scale = 1.0 / (c as f32).sqrt();
        ds.mapv_inplace(|v| v * scale);
        let dq2 = matmul(&ctx.k.view(), &ds.t());
        let dk2 = matmul(&ctx.q.view(), &ds.view());
        let to4 = |m: Array2<f32>| {
            m.into_shape_with_order(((c, zd, yd, xd), Order::RowMajor)).unwrap()
        };
        let (dqf, dkf, dvf) = (to4(dq2), to4(dk2), to4(dv2));
        let mut dh = self.q.backward(store, &ctx.h, &dqf, grads.as_deref_mut());
        dh += &self.k.backward(store, &ctx.h, &dkf, grads.as_deref_mut());
        dh += &self.v.backward(store, &ctx.h, &dvf, grads.as_deref_mut());
        let dx_map = self.norm.backward(store, &ctx.gn, &dh, grads);
        dx_map + dy
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap()
}

/// Splits a channel gradient back into the two concatenated parts.
pub fn split_channels(dy: &Feat, c_first: usize) -> (Feat, Feat) {
    let a = dy.slice(s![..c_first, .., .., ..]).to_owned();
    let b = dy.slice(s![c_first.., .., .., ..]).to_owned();
    (a, b)
}
