//! Conditional branch grafted onto a frozen base network.
//!
//! The branch owns a structural copy of the base encoder (stem, blocks,
//! downsamples, middle, time MLP) in its own parameter store, plus a
//! condition embedding and one zero-initialized pointwise fusion conv per
//! skip and for the middle. Fusion adds into the base features, so at
//! initialization the conditional model reproduces the base model output
//! value for value; training moves only this branch while the base stays
//! untouched.

use super::ops::{silu, silu_backward, Conv3d, ConvSpec, Feat};
use super::param::{Grads, ParamStore};
use super::unet::{BaseModel, DecodeCtx, EncoderStack, NetworkConfig, StackCtx, TimeCtx, TimeMlp};
use crate::diffusion::CONDITION_CHANNELS;
use crate::error::{DecadeError, Result};
use ndarray::Array2;

/// Parameter-name prefixes the branch shares with the base network.
const SHARED_PREFIXES: [&str; 6] = ["temb.", "stem.", "enc", "down", "mid", "attn."];

fn is_shared(name: &str) -> bool {
    SHARED_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Three-conv embedding of the conditioning stack, ending in a
/// zero-initialized pointwise conv so it contributes nothing at init.
#[derive(Debug, Clone)]
pub struct CondEmbed {
    c1: Conv3d,
    c2: Conv3d,
    zc: Conv3d,
}

#[derive(Debug, Clone)]
pub struct CondEmbedCtx {
    cond: Feat,
    h1: Feat,
    a1: Feat,
    h2: Feat,
    a2: Feat,
}

impl CondEmbed {
    fn register(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        let c0 = cfg.channels_at(0);
        let spec1 = if cfg.three_d {
            ConvSpec::k3s1p1(CONDITION_CHANNELS, c0)
        } else {
            ConvSpec::k3s1p1_2d(CONDITION_CHANNELS, c0)
        };
        let spec2 = if cfg.three_d {
            ConvSpec::k3s1p1(c0, c0)
        } else {
            ConvSpec::k3s1p1_2d(c0, c0)
        };
        Ok(CondEmbed {
            c1: Conv3d::register(store, "cond.c1", spec1, false)?,
            c2: Conv3d::register(store, "cond.c2", spec2, false)?,
            zc: Conv3d::register(store, "cond.zc", ConvSpec::k1(c0, c0), true)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, cond: &Feat) -> (Feat, CondEmbedCtx) {
        let h1 = self.c1.forward(store, cond);
        let a1 = silu(&h1);
        let h2 = self.c2.forward(store, &a1);
        let a2 = silu(&h2);
        let out = self.zc.forward(store, &a2);
        (out, CondEmbedCtx { cond: cond.clone(), h1, a1, h2, a2 })
    }

    /// Parameter gradients only; the condition itself is a constant input.
    pub fn backward(&self, store: &ParamStore, ctx: &CondEmbedCtx, dy: &Feat, mut grads: Option<&mut Grads>) {
        let da2 = self.zc.backward(store, &ctx.a2, dy, grads.as_deref_mut());
        let dh2 = silu_backward(&ctx.h2, &da2);
        let da1 = self.c2.backward(store, &ctx.a1, &dh2, grads.as_deref_mut());
        let dh1 = silu_backward(&ctx.h1, &da1);
        let _ = self.c1.backward(store, &ctx.cond, &dh1, grads);
    }
}

/// The trainable conditional branch.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub cfg: NetworkConfig,
    pub table: Array2<f32>,
    pub tmlp: TimeMlp,
    pub stack: EncoderStack,
    pub cond: CondEmbed,
    pub zc_skips: Vec<Conv3d>,
    pub zc_mid: Conv3d,
}

impl ControlBranch {
    pub fn register(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let tmlp = TimeMlp::register(store, "temb", cfg.temb_dim)?;
        let stack = EncoderStack::register(store, cfg, cfg.in_channels)?;
        let cond = CondEmbed::register(store, cfg)?;
        let mut zc_skips = Vec::new();
        for l in 0..cfg.levels() {
            let c = cfg.channels_at(l);
            zc_skips.push(Conv3d::register(store, &format!("zc.s{l}"), ConvSpec::k1(c, c), true)?);
        }
        let c_mid = cfg.channels_at(cfg.levels() - 1);
        let zc_mid = Conv3d::register(store, "zc.mid", ConvSpec::k1(c_mid, c_mid), true)?;
        let table = super::ops::sinusoidal_table(cfg.n_steps, cfg.temb_dim);
        Ok(ControlBranch { cfg: cfg.clone(), table, tmlp, stack, cond, zc_skips, zc_mid })
    }

    /// Copies every shared tensor from the base store; fusion and condition
    /// convs keep their zero/fresh initialization. Returns the copy count.
    pub fn init_from_base(ctrl_store: &mut ParamStore, base_store: &ParamStore) -> Result<usize> {
        let expected = base_store.iter().filter(|p| is_shared(&p.name)).count();
        let copied = ctrl_store.copy_renamed_from(base_store, |name| {
            if is_shared(name) { Some(name.to_string()) } else { None }
        })?;
        if copied != expected || copied == 0 {
            return Err(DecadeError::validation(format!(
                "control init copied {copied} tensors, expected {expected}"
            )));
        }
        Ok(copied)
    }
}

/// Base model plus control branch, evaluated jointly.
pub struct ConditionalModel {
    pub base: BaseModel,
    pub ctrl: ControlBranch,
}

/// Saved activations of one conditional forward.
pub struct CondFwdCtx {
    time_b: TimeCtx,
    time_c: TimeCtx,
    stack_b: StackCtx,
    stack_c: StackCtx,
    decode: DecodeCtx,
    cond_ctx: CondEmbedCtx,
}

impl ConditionalModel {
    pub fn new(base: BaseModel, ctrl: ControlBranch) -> Result<Self> {
        if base.cfg != ctrl.cfg {
            return Err(DecadeError::validation("base and control configs differ"));
        }
        Ok(ConditionalModel { base, ctrl })
    }

    /// Noise prediction conditioned on `cond`; `x` is `[1, Z, Y, X]`, `cond`
    /// `[3, Z, Y, X]`.
    pub fn forward(
        &self,
        base_store: &ParamStore,
        ctrl_store: &ParamStore,
        x: &Feat,
        t: usize,
        cond: &Feat,
    ) -> (Feat, CondFwdCtx) {
        assert_eq!(cond.dim().0, CONDITION_CHANNELS, "condition channels");
        let time_b = self.base.tmlp.forward(base_store, &self.base.table, t);
        let time_c = self.ctrl.tmlp.forward(ctrl_store, &self.ctrl.table, t);
        let (cond_emb, cond_ctx) = self.ctrl.cond.forward(ctrl_store, cond);
        let stack_b = self.base.stack.forward(base_store, x, &time_b.st, None);
        let stack_c = self.ctrl.stack.forward(ctrl_store, x, &time_c.st, Some(&cond_emb));

        let mut fused_skips = Vec::with_capacity(stack_b.skips.len());
        for (l, (sb, sc)) in stack_b.skips.iter().zip(&stack_c.skips).enumerate() {
            fused_skips.push(sb + &self.ctrl.zc_skips[l].forward(ctrl_store, sc));
        }
        let fused_mid = &stack_b.mid_out + &self.ctrl.zc_mid.forward(ctrl_store, &stack_c.mid_out);

        let (y, decode) = self.base.decode(base_store, &fused_skips, &fused_mid, &time_b.st);
        (y, CondFwdCtx { time_b, time_c, stack_b, stack_c, decode, cond_ctx })
    }

    /// Backward through the joint graph.
    ///
    /// `ctrl_grads` drives branch training; `base_grads` is normally `None`
    /// (the base is frozen). The input gradient is computed only when
    /// `need_dx` is set, which also decides whether the frozen base encoder
    /// is traversed at all.
    pub fn backward(
        &self,
        base_store: &ParamStore,
        ctrl_store: &ParamStore,
        ctx: &CondFwdCtx,
        dy: &Feat,
        mut base_grads: Option<&mut Grads>,
        mut ctrl_grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Feat> {
        let (d_skips_f, d_mid_f, d_st_b_dec) = self.base.decode_backward(
            base_store,
            &ctx.decode,
            &ctx.time_b.st,
            dy,
            base_grads.as_deref_mut(),
        );

        // Fusion is a sum: the base side passes gradients through unchanged,
        // the branch side goes through its pointwise conv.
        let mut d_skips_c = Vec::with_capacity(d_skips_f.len());
        for (l, dsf) in d_skips_f.iter().enumerate() {
            d_skips_c.push(self.ctrl.zc_skips[l].backward(
                ctrl_store,
                &ctx.stack_c.skips[l],
                dsf,
                ctrl_grads.as_deref_mut(),
            ));
        }
        let d_mid_c = self.ctrl.zc_mid.backward(
            ctrl_store,
            &ctx.stack_c.mid_out,
            &d_mid_f,
            ctrl_grads.as_deref_mut(),
        );

        let (dx_c, d_st_c, d_stem_extra) = self.ctrl.stack.backward(
            ctrl_store,
            &ctx.stack_c,
            &ctx.time_c.st,
            &d_skips_c,
            &d_mid_c,
            ctrl_grads.as_deref_mut(),
        );
        if ctrl_grads.is_some() {
            self.ctrl
                .tmlp
                .backward(ctrl_store, &ctx.time_c, &d_st_c, ctrl_grads.as_deref_mut());
            self.ctrl.cond.backward(
                ctrl_store,
                &ctx.cond_ctx,
                &d_stem_extra,
                ctrl_grads.as_deref_mut(),
            );
        }

        if need_dx || base_grads.is_some() {
            let (dx_b, d_st_b_stack, _) = self.base.stack.backward(
                base_store,
                &ctx.stack_b,
                &ctx.time_b.st,
                &d_skips_f,
                &d_mid_f,
                base_grads.as_deref_mut(),
            );
            if base_grads.is_some() {
                let d_st: Vec<f32> = d_st_b_dec
                    .iter()
                    .zip(&d_st_b_stack)
                    .map(|(a, b)| a + b)
                    .collect();
                self.base.tmlp.backward(base_store, &ctx.time_b, &d_st, base_grads);
            }
            if need_dx {
                return Some(dx_b + &dx_c);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::ParamStore;
    use ndarray::Array4;
    use rand::Rng;

    fn rand_feat(seed: u64, dims: (usize, usize, usize, usize)) -> Feat {
        let mut rng = crate::seed::rng(seed);
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0f32..1.0))
    }

    fn loss_of(y: &Feat, g: &Feat) -> f64 {
        y.iter().zip(g.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            base_channels: 4,
            channel_mults: vec![1, 2],
            temb_dim: 8,
            n_steps: 50,
            attention: true,
            three_d: true,
        }
    }

    fn build(seed: u64) -> (ParamStore, ParamStore, ConditionalModel) {
        let cfg = tiny_cfg();
        let mut base_store = ParamStore::new(seed);
        let base = BaseModel::register(&mut base_store, &cfg).unwrap();
        let mut ctrl_store = ParamStore::new(seed + 1);
        let ctrl = ControlBranch::register(&mut ctrl_store, &cfg).unwrap();
        ControlBranch::init_from_base(&mut ctrl_store, &base_store).unwrap();
        let model = ConditionalModel::new(base, ctrl).unwrap();
        (base_store, ctrl_store, model)
    }

    #[test]
    fn init_copies_all_shared_tensors() {
        let cfg = tiny_cfg();
        let mut base_store = ParamStore::new(9);
        let _ = BaseModel::register(&mut base_store, &cfg).unwrap();
        let mut ctrl_store = ParamStore::new(10);
        let _ = ControlBranch::register(&mut ctrl_store, &cfg).unwrap();
        let copied = ControlBranch::init_from_base(&mut ctrl_store, &base_store).unwrap();
        // Every ctrl tensor except cond.* and zc.* mirrors a base tensor.
        let own = ctrl_store
            .iter()
            .filter(|p| p.name.starts_with("cond.") || p.name.starts_with("zc."))
            .count();
        assert_eq!(copied + own, ctrl_store.len());
        for p in ctrl_store.iter() {
            if is_shared(&p.name) {
                let base_id = base_store.lookup(&p.name).unwrap();
                assert_eq!(p.data, base_store.data(base_id), "mismatch at {}", p.name);
            }
        }
    }

    #[test]
    fn conditional_equals_base_at_initialization() {
        let (base_store, ctrl_store, model) = build(20);
        let x = rand_feat(21, (1, 4, 4, 4));
        let cond = rand_feat(22, (3, 4, 4, 4));
        for t in [1usize, 25, 50] {
            let (yb, _) = model.base.forward(&base_store, &x, t);
            let (yc, _) = model.forward(&base_store, &ctrl_store, &x, t, &cond);
            assert_eq!(yb.dim(), yc.dim());
            for (&a, &b) in yb.iter().zip(yc.iter()) {
                assert!(a == b, "drift at init: {a} vs {b}");
            }
        }
    }

    fn randomize(store: &mut ParamStore, names: &[&str], seed: u64, scale: f32) {
        let mut rng = crate::seed::rng(seed);
        for name in names {
            let id = store.lookup(name).unwrap();
            let n = store.data(id).len();
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            store.data_mut(id).copy_from_slice(&w);
        }
    }

    /// Makes the conditional path actually active: fusion and head weights
    /// become nonzero so gradients reach every part of both graphs.
    fn activate(base_store: &mut ParamStore, ctrl_store: &mut ParamStore) {
        randomize(base_store, &["head.conv.w"], 30, 0.3);
        randomize(ctrl_store, &["zc.s0.w", "zc.s1.w", "zc.mid.w", "cond.zc.w"], 31, 0.3);
    }

    #[test]
    fn conditional_gradients_match_fd() {
        let (mut base_store, mut ctrl_store, model) = build(40);
        activate(&mut base_store, &mut ctrl_store);
        let x = rand_feat(41, (1, 4, 4, 4));
        let cond = rand_feat(42, (3, 4, 4, 4));
        let t = 13;
        let (y, ctx) = model.forward(&base_store, &ctrl_store, &x, t, &cond);
        let g = rand_feat(43, y.dim());
        let mut bg = Grads::zeros_like(&base_store);
        let mut cg = Grads::zeros_like(&ctrl_store);
        let dx = model
            .backward(&base_store, &ctrl_store, &ctx, &g, Some(&mut bg), Some(&mut cg), true)
            .unwrap();

        let h = 1e-2f32;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-8);

        // Input gradient: both encoder paths contribute.
        let mut xp = x.clone();
        for &i in &[0usize, 17, 33, 49, 63] {
            let orig = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss_of(&model.forward(&base_store, &ctrl_store, &xp, t, &cond).0, &g);
            xp.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss_of(&model.forward(&base_store, &ctrl_store, &xp, t, &cond).0, &g);
            xp.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = dx.as_slice().unwrap()[i] as f64;
            assert!(
                rel(fd, an) < 2e-3 || (fd.abs() < 1e-6 && an.abs() < 1e-6),
                "dx[{i}]: fd {fd} vs {an}"
            );
        }

        // Branch parameters, including condition embedding and fusion.
        for name in ["cond.c1.w", "cond.c2.w", "zc.s1.w", "zc.mid.w", "stem.w", "mid1.conv1.w", "temb.l2.w"] {
            let id = ctrl_store.lookup(name).unwrap();
            let i = cg
                .get(id)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap();
            let mut ps = ctrl_store.clone();
            let orig = ps.data(id)[i];
            ps.data_mut(id)[i] = orig + h;
            let lp = loss_of(&model.forward(&base_store, &ps, &x, t, &cond).0, &g);
            ps.data_mut(id)[i] = orig - h;
            let lm = loss_of(&model.forward(&base_store, &ps, &x, t, &cond).0, &g);
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = cg.get(id)[i] as f64;
            assert!(
                rel(fd, an) < 2e-3 || (fd.abs() < 1e-6 && an.abs() < 1e-6),
                "ctrl {name}[{i}]: fd {fd} vs {an}"
            );
        }

        // Base parameters see gradients through decoder and frozen encoder.
        for name in ["dec0.conv1.w", "head.conv.w", "enc0.conv1.w"] {
            let id = base_store.lookup(name).unwrap();
            let i = bg
                .get(id)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap();
            let mut ps = base_store.clone();
            let orig = ps.data(id)[i];
            ps.data_mut(id)[i] = orig + h;
            let lp = loss_of(&model.forward(&ps, &ctrl_store, &x, t, &cond).0, &g);
            ps.data_mut(id)[i] = orig - h;
            let lm = loss_of(&model.forward(&ps, &ctrl_store, &x, t, &cond).0, &g);
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = bg.get(id)[i] as f64;
            assert!(
                rel(fd, an) < 2e-3 || (fd.abs() < 1e-6 && an.abs() < 1e-6),
                "base {name}[{i}]: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn frozen_mode_reproduces_ctrl_gradients_of_full_mode() {
        let (mut base_store, mut ctrl_store, model) = build(60);
        activate(&mut base_store, &mut ctrl_store);
        let x = rand_feat(61, (1, 4, 4, 4));
        let cond = rand_feat(62, (3, 4, 4, 4));
        let (y, ctx) = model.forward(&base_store, &ctrl_store, &x, 7, &cond);
        let g = rand_feat(63, y.dim());

        let mut cg_full = Grads::zeros_like(&ctrl_store);
        let mut bg = Grads::zeros_like(&base_store);
        model.backward(&base_store, &ctrl_store, &ctx, &g, Some(&mut bg), Some(&mut cg_full), true);

        let mut cg_frozen = Grads::zeros_like(&ctrl_store);
        let dx = model.backward(&base_store, &ctrl_store, &ctx, &g, None, Some(&mut cg_frozen), false);
        assert!(dx.is_none());
        for p in ctrl_store.iter() {
            let id = ctrl_store.lookup(&p.name).unwrap();
            assert_eq!(cg_full.get(id), cg_frozen.get(id), "grad drift at {}", p.name);
        }
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_guided_step_desk_size() {
        let cfg = NetworkConfig::default();
        let mut base_store = ParamStore::new(1);
        let base = BaseModel::register(&mut base_store, &cfg).unwrap();
        let mut ctrl_store = ParamStore::new(2);
        let ctrl = ControlBranch::register(&mut ctrl_store, &cfg).unwrap();
        ControlBranch::init_from_base(&mut ctrl_store, &base_store).unwrap();
        let model = ConditionalModel::new(base, ctrl).unwrap();

        let x = rand_feat(3, (1, 24, 24, 24));
        let cond = rand_feat(4, (3, 24, 24, 24));
        let g = rand_feat(5, (1, 24, 24, 24));

        let iters = 30;
        let t0 = std::time::Instant::now();
        for i in 0..iters {
            let (_, ctx) = model.forward(&base_store, &ctrl_store, &x, 1 + (i % 999), &cond);
            let _ = model.backward(&base_store, &ctrl_store, &ctx, &g, None, None, true);
        }
        let per = t0.elapsed().as_secs_f64() / iters as f64;
        let t1 = std::time::Instant::now();
        for i in 0..iters {
            let _ = model.base.forward(&base_store, &x, 1 + (i % 999));
        }
        let per_base = t1.elapsed().as_secs_f64() / iters as f64;
        let t2 = std::time::Instant::now();
        for i in 0..iters {
            let _ = model.forward(&base_store, &ctrl_store, &x, 1 + (i % 999), &cond);
        }
        let per_fwd = t2.elapsed().as_secs_f64() / iters as f64;
        println!("guided step (cond fwd + vjp): {:.2} ms", per * 1e3);
        println!("cond fwd only:                {:.2} ms", per_fwd * 1e3);
        println!("base fwd only:                {:.2} ms", per_base * 1e3);
    }

    #[test]
    fn mismatched_configs_rejected() {
        let cfg = tiny_cfg();
        let mut base_store = ParamStore::new(70);
        let base = BaseModel::register(&mut base_store, &cfg).unwrap();
        let mut other = cfg.clone();
        other.base_channels = 8;
        let mut ctrl_store = ParamStore::new(71);
        let ctrl = ControlBranch::register(&mut ctrl_store, &other).unwrap();
        assert!(ConditionalModel::new(base, ctrl).is_err());
    }
}
