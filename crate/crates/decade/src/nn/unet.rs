//! UNet noise predictor.
//!
//! The encoder (stem, residual blocks, downsamples, middle) is factored out
//! as [`EncoderStack`] so the conditional branch can instantiate an exact
//! structural copy in its own parameter store. Backward passes mirror the
//! forward graph; every function takes `Option<&mut Grads>` and skips all
//! weight-gradient work when it is `None`.

use super::ops::{
    add_channel_bias, channel_bias_grad, concat_channels, silu, silu_backward, silu_vec,
    silu_vec_backward, sinusoidal_table, split_channels, upsample_nearest,
    upsample_nearest_backward, Attention, AttnCtx, Conv3d, ConvSpec, Feat, GnCtx, GroupNorm,
    Linear,
};
use super::param::{Grads, ParamStore};
use crate::error::{DecadeError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters; serialized into checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub temb_dim: usize,
    pub n_steps: usize,
    pub attention: bool,
    pub three_d: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            base_channels: 4,
            channel_mults: vec![1, 2],
            temb_dim: 32,
            n_steps: 1000,
            attention: false,
            three_d: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(DecadeError::validation("channel counts must be positive"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.iter().any(|&m| m == 0) {
            return Err(DecadeError::validation("channel_mults must be nonempty and positive"));
        }
        if self.temb_dim < 4 || self.temb_dim % 2 != 0 {
            return Err(DecadeError::validation("temb_dim must be even and >= 4"));
        }
        if self.n_steps < 2 {
            return Err(DecadeError::validation("n_steps must be >= 2"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn res_spec(&self, c_in: usize, c_out: usize) -> ConvSpec {
        if self.three_d {
            ConvSpec::k3s1p1(c_in, c_out)
        } else {
            ConvSpec::k3s1p1_2d(c_in, c_out)
        }
    }

    fn down_spec(&self, c: usize) -> ConvSpec {
        if self.three_d {
            ConvSpec { c_in: c, c_out: c, kernel: [3; 3], stride: [2; 3], pad: [1; 3] }
        } else {
            ConvSpec { c_in: c, c_out: c, kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] }
        }
    }

    pub fn scale_factor(&self) -> [usize; 3] {
        if self.three_d { [2, 2, 2] } else { [1, 2, 2] }
    }

    /// Every downsampled axis must split evenly at each level.
    pub fn check_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let div = 1usize << (self.levels() - 1);
        let f = self.scale_factor();
        let d = [dims.0, dims.1, dims.2];
        for i in 0..3 {
            if f[i] > 1 && d[i] % div != 0 {
                return Err(DecadeError::validation(format!(
                    "dims {dims:?} not divisible by {div} on axis {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Residual block with time-embedding injection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv3d,
    proj: Linear,
    gn2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
    pub c_in: usize,
    pub c_out: usize,
}

/// Activations one residual block saves for backward.
#[derive(Debug, Clone)]
pub struct ResCtx {
    x: Feat,
    gn1: GnCtx,
    n1: Feat,
    a1: Feat,
    gn2: GnCtx,
    n2: Feat,
    a2: Feat,
}

impl ResBlock {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        cfg: &NetworkConfig,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let gn1 = GroupNorm::register(store, &format!("{name}.gn1"), c_in)?;
        let conv1 = Conv3d::register(store, &format!("{name}.conv1"), cfg.res_spec(c_in, c_out), false)?;
        let proj = Linear::register(store, &format!("{name}.proj"), cfg.temb_dim, c_out, false)?;
        let gn2 = GroupNorm::register(store, &format!("{name}.gn2"), c_out)?;
        let conv2 = Conv3d::register(store, &format!("{name}.conv2"), cfg.res_spec(c_out, c_out), false)?;
        let skip = if c_in != c_out {
            Some(Conv3d::register(store, &format!("{name}.skip"), ConvSpec::k1(c_in, c_out), false)?)
        } else {
            None
        };
        Ok(ResBlock { gn1, conv1, proj, gn2, conv2, skip, c_in, c_out })
    }

    /// `st` is the shared silu-activated time embedding.
    pub fn forward(&self, store: &ParamStore, x: &Feat, st: &[f32]) -> (Feat, ResCtx) {
        let (n1, gn1) = self.gn1.forward(store, x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(store, &a1);
        let bias = self.proj.forward(store, st);
        add_channel_bias(&mut h, &bias);
        let (n2, gn2) = self.gn2.forward(store, &h);
        let a2 = silu(&n2);
        let h2 = self.conv2.forward(store, &a2);
        let skipped = match &self.skip {
            Some(conv) => conv.forward(store, x),
            None => x.clone(),
        };
        (h2 + &skipped, ResCtx { x: x.clone(), gn1, n1, a1, gn2, n2, a2 })
    }

    /// Returns (dx, d_st).
    pub fn backward(
        &self,
        store: &ParamStore,
        ctx: &ResCtx,
        st: &[f32],
        dy: &Feat,
        mut grads: Option<&mut Grads>,
    ) -> (Feat, Vec<f32>) {
        let dx_skip = match &self.skip {
            Some(conv) => conv.backward(store, &ctx.x, dy, grads.as_deref_mut()),
            None => dy.clone(),
        };
        let da2 = self.conv2.backward(store, &ctx.a2, dy, grads.as_deref_mut());
        let dn2 = silu_backward(&ctx.n2, &da2);
        let dh = self.gn2.backward(store, &ctx.gn2, &dn2, grads.as_deref_mut());
        let d_bias = channel_bias_grad(&dh);
        let d_st = self.proj.backward(store, st, &d_bias, grads.as_deref_mut());
        let da1 = self.conv1.backward(store, &ctx.a1, &dh, grads.as_deref_mut());
        let dn1 = silu_backward(&ctx.n1, &da1);
        let dx = self.gn1.backward(store, &ctx.gn1, &dn1, grads);
        (dx + &dx_skip, d_st)
    }
}

/// Two-layer MLP over the sinusoidal step table.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone)]
pub struct TimeCtx {
    e0: Vec<f32>,
    h1: Vec<f32>,
    a1: Vec<f32>,
    temb: Vec<f32>,
    /// silu(temb), consumed by every residual block.
    pub st: Vec<f32>,
}

impl TimeMlp {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(TimeMlp {
            l1: Linear::register(store, &format!("{name}.l1"), dim, dim, false)?,
            l2: Linear::register(store, &format!("{name}.l2"), dim, dim, false)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, table: &Array2<f32>, t: usize) -> TimeCtx {
        let e0: Vec<f32> = table.row(t - 1).to_vec();
        let h1 = self.l1.forward(store, &e0);
        let a1 = silu_vec(&h1);
        let temb = self.l2.forward(store, &a1);
        let st = silu_vec(&temb);
        TimeCtx { e0, h1, a1, temb, st }
    }

    pub fn backward(&self, store: &ParamStore, ctx: &TimeCtx, d_st: &[f32], mut grads: Option<&mut Grads>) {
        let d_temb = silu_vec_backward(&ctx.temb, d_st);
        let d_a1 = self.l2.backward(store, &ctx.a1, &d_temb, grads.as_deref_mut());
        let d_h1 = silu_vec_backward(&ctx.h1, &d_a1);
        // Table rows are fixed; the input gradient stops here.
        let _ = self.l1.backward(store, &ctx.e0, &d_h1, grads);
    }
}

/// Stem, per-level residual blocks with downsampling, and the middle blocks.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub stem: Conv3d,
    pub enc: Vec<ResBlock>,
    pub down: Vec<Conv3d>,
    pub mid1: ResBlock,
    pub attn: Option<Attention>,
    pub mid2: ResBlock,
}

/// Forward activations of one encoder pass.
pub struct StackCtx {
    stem_in: Feat,
    enc_ctx: Vec<ResCtx>,
    /// Post-block features per level, also the skip values.
    pub skips: Vec<Feat>,
    mid1_ctx: ResCtx,
    attn_ctx: Option<AttnCtx>,
    mid2_ctx: ResCtx,
    pub mid_out: Feat,
}

impl EncoderStack {
    pub fn register(store: &mut ParamStore, cfg: &NetworkConfig, in_channels: usize) -> Result<Self> {
        let c0 = cfg.channels_at(0);
        let stem = Conv3d::register(store, "stem", cfg.res_spec(in_channels, c0), false)?;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut c_prev = c0;
        for l in 0..cfg.levels() {
            let c_l = cfg.channels_at(l);
            enc.push(ResBlock::register(store, &format!("enc{l}"), cfg, c_prev, c_l)?);
            if l + 1 < cfg.levels() {
                down.push(Conv3d::register(store, &format!("down{l}"), cfg.down_spec(c_l), false)?);
            }
            c_prev = c_l;
        }
        let c_mid = cfg.channels_at(cfg.levels() - 1);
        let mid1 = ResBlock::register(store, "mid1", cfg, c_mid, c_mid)?;
        let attn = if cfg.attention {
            Some(Attention::register(store, "attn", c_mid)?)
        } else {
            None
        };
        let mid2 = ResBlock::register(store, "mid2", cfg, c_mid, c_mid)?;
        Ok(EncoderStack { stem, enc, down, mid1, attn, mid2 })
    }

    /// `stem_extra` is added to the stem output before the first block; the
    /// conditional branch injects its condition embedding there.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Feat,
        st: &[f32],
        stem_extra: Option<&Feat>,
    ) -> StackCtx {
        let levels = self.enc.len();
        let mut h = self.stem.forward(store, x);
        if let Some(extra) = stem_extra {
            h += extra;
        }
        let mut enc_ctx = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            let (out, rc) = self.enc[l].forward(store, &h, st);
            enc_ctx.push(rc);
            skips.push(out.clone());
            h = if l + 1 < levels { self.down[l].forward(store, &out) } else { out };
        }
        let (h, mid1_ctx) = self.mid1.forward(store, &h, st);
        let (h, attn_ctx) = match &self.attn {
            Some(a) => {
                let (y, c) = a.forward(store, &h);
                (y, Some(c))
            }
            None => (h, None),
        };
        let (mid_out, mid2_ctx) = self.mid2.forward(store, &h, st);
        StackCtx { stem_in: x.clone(), enc_ctx, skips, mid1_ctx, attn_ctx, mid2_ctx, mid_out }
    }

    /// Pulls gradients back through the stack given gradients on every skip
    /// and on the middle output. Returns (dx, d_st, d_stem_junction); the
    /// last is the gradient where `stem_extra` is added, which the
    /// conditional branch backpropagates into its condition embedding.
    pub fn backward(
        &self,
        store: &ParamStore,
        ctx: &StackCtx,
        st: &[f32],
        d_skips: &[Feat],
        d_mid: &Feat,
        mut grads: Option<&mut Grads>,
    ) -> (Feat, Vec<f32>, Feat) {
        let levels = self.enc.len();
        let mut d_st_total = vec![0.0f32; st.len()];
        let add_dst = |acc: &mut Vec<f32>, d: Vec<f32>| {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        };

        let (dh, dst) = self.mid2.backward(store, &ctx.mid2_ctx, st, d_mid, grads.as_deref_mut());
        add_dst(&mut d_st_total, dst);
        let dh = match (&self.attn, &ctx.attn_ctx) {
            (Some(a), Some(ac)) => a.backward(store, ac, &dh, grads.as_deref_mut()),
            _ => dh,
        };
        let (mut dh, dst) = self.mid1.backward(store, &ctx.mid1_ctx, st, &dh, grads.as_deref_mut());
        add_dst(&mut d_st_total, dst);

        for l in (0..levels).rev() {
            let g = dh + &d_skips[l];
            let (dprev, dst) = self.enc[l].backward(store, &ctx.enc_ctx[l], st, &g, grads.as_deref_mut());
            add_dst(&mut d_st_total, dst);
            if l > 0 {
                dh = self.down[l - 1].backward(store, &ctx.skips[l - 1], &dprev, grads.as_deref_mut());
            } else {
                dh = dprev;
            }
        }
        let dx = self.stem.backward(store, &ctx.stem_in, &dh, grads);
        (dx, d_st_total, dh)
    }
}

/// Full base network: encoder stack plus decoder and output head.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub cfg: NetworkConfig,
    pub table: Array2<f32>,
    pub tmlp: TimeMlp,
    pub stack: EncoderStack,
    pub dec: Vec<ResBlock>,
    pub up: Vec<Conv3d>,
    pub head_gn: GroupNorm,
    pub head_conv: Conv3d,
}

/// Forward activations of a decode pass.
pub struct DecodeCtx {
    dec_ctx: Vec<ResCtx>,
    /// Input to the post-upsample projection, per level > 0.
    up_in: Vec<Feat>,
    head_gn_ctx: GnCtx,
    head_n: Feat,
    head_a: Feat,
    skip_channels: Vec<usize>,
}

/// Full forward context for one (x, t) evaluation of the base model.
pub struct BaseCtx {
    pub time: TimeCtx,
    pub stack: StackCtx,
    pub decode: DecodeCtx,
}

impl BaseModel {
    pub fn register(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let tmlp = TimeMlp::register(store, "temb", cfg.temb_dim)?;
        let stack = EncoderStack::register(store, cfg, cfg.in_channels)?;
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for l in 0..cfg.levels() {
            let c_l = cfg.channels_at(l);
            dec.push(ResBlock::register(store, &format!("dec{l}"), cfg, 2 * c_l, c_l)?);
            if l > 0 {
                let c_prev = cfg.channels_at(l - 1);
                up.push(Conv3d::register(store, &format!("up{l}"), ConvSpec::k1(c_l, c_prev), false)?);
            }
        }
        let c0 = cfg.channels_at(0);
        let head_gn = GroupNorm::register(store, "head.gn", c0)?;
        let head_conv = Conv3d::register(
            store,
            "head.conv",
            cfg.res_spec(c0, cfg.in_channels),
            true,
        )?;
        let table = sinusoidal_table(cfg.n_steps, cfg.temb_dim);
        Ok(BaseModel { cfg: cfg.clone(), table, tmlp, stack, dec, up, head_gn, head_conv })
    }

    /// Decoder over fused skip/middle features.
    pub fn decode(
        &self,
        store: &ParamStore,
        skips: &[Feat],
        mid: &Feat,
        st: &[f32],
    ) -> (Feat, DecodeCtx) {
        let levels = self.cfg.levels();
        let f = self.cfg.scale_factor();
        let mut h = mid.clone();
        let mut dec_ctx: Vec<Option<ResCtx>> = (0..levels).map(|_| None).collect();
        let mut up_in: Vec<Option<Feat>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        let mut skip_channels = vec![0usize; levels];
        for l in (0..levels).rev() {
            skip_channels[l] = skips[l].dim().0;
            let cat = concat_channels(&skips[l], &h);
            let (out, rc) = self.dec[l].forward(store, &cat, st);
            dec_ctx[l] = Some(rc);
            h = out;
            if l > 0 {
                let upsampled = upsample_nearest(&h, f);
                up_in[l - 1] = Some(upsampled.clone());
                h = self.up[l - 1].forward(store, &upsampled);
            }
        }
        let (n, head_gn_ctx) = self.head_gn.forward(store, &h);
        let a = silu(&n);
        let y = self.head_conv.forward(store, &a);
        (
            y,
            DecodeCtx {
                dec_ctx: dec_ctx.into_iter().map(|c| c.unwrap()).collect(),
                up_in: up_in.into_iter().map(|c| c.unwrap()).collect(),
                head_gn_ctx,
                head_n: n,
                head_a: a,
                skip_channels,
            },
        )
    }

    /// Backward through the decoder; returns per-level skip gradients, the
    /// middle gradient, and d_st.
    pub fn decode_backward(
        &self,
        store: &ParamStore,
        ctx: &DecodeCtx,
        st: &[f32],
        dy: &Feat,
        mut grads: Option<&mut Grads>,
    ) -> (Vec<Feat>, Feat, Vec<f32>) {
        let levels = self.cfg.levels();
        let f = self.cfg.scale_factor();
        let mut d_st_total = vec![0.0f32; st.len()];
        let da = self.head_conv.backward(store, &ctx.head_a, dy, grads.as_deref_mut());
        let dn = silu_backward(&ctx.head_n, &da);
        let mut dh = self.head_gn.backward(store, &ctx.head_gn_ctx, &dn, grads.as_deref_mut());

        let mut d_skips: Vec<Option<Feat>> = (0..levels).map(|_| None).collect();
        for l in 0..levels {
            if l > 0 {
                let dup = self.up[l - 1].backward(store, &ctx.up_in[l - 1], &dh, grads.as_deref_mut());
                dh = upsample_nearest_backward(&dup, f);
            }
            let (dcat, dst) = self.dec[l].backward(store, &ctx.dec_ctx[l], st, &dh, grads.as_deref_mut());
            for (a, b) in d_st_total.iter_mut().zip(dst) {
                *a += b;
            }
            let (ds, dmid) = split_channels(&dcat, ctx.skip_channels[l]);
            d_skips[l] = Some(ds);
            dh = dmid;
        }
        (d_skips.into_iter().map(|d| d.unwrap()).collect(), dh, d_st_total)
    }

    /// Predicts the noise content of `x` at step `t` (1-based).
    pub fn forward(&self, store: &ParamStore, x: &Feat, t: usize) -> (Feat, BaseCtx) {
        assert!(t >= 1 && t <= self.cfg.n_steps, "step {t} out of range");
        let time = self.tmlp.forward(store, &self.table, t);
        let stack = self.stack.forward(store, x, &time.st, None);
        let (y, decode) = self.decode(store, &stack.skips, &stack.mid_out, &time.st);
        (y, BaseCtx { time, stack, decode })
    }

    /// Gradient of a scalar loss with respect to the input, given dL/dy.
    /// With `grads` set, also accumulates parameter gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        ctx: &BaseCtx,
        dy: &Feat,
        mut grads: Option<&mut Grads>,
    ) -> Feat {
        let st = &ctx.time.st;
        let (d_skips, d_mid, mut d_st) =
            self.decode_backward(store, &ctx.decode, st, dy, grads.as_deref_mut());
        let (dx, d_st_stack, _) =
            self.stack
                .backward(store, &ctx.stack, st, &d_skips, &d_mid, grads.as_deref_mut());
        for (a, b) in d_st.iter_mut().zip(d_st_stack) {
            *a += b;
        }
        self.tmlp.backward(store, &ctx.time, &d_st, grads);
        dx
    }
}
