//! Generative expert: a full-attention diffusion-style transformer that
//! denoises pattern latents under flow matching.
//!
//! The sequence is `[16 latent tokens || n_srt semantic tokens]`. Surplus
//! blocks (the noise projector) run first with plain self-attention; aligned
//! blocks whose index appears in the bridge plan run shared attention over
//! the understanding expert's cached keys/values for their paired layer.
//! Timestep conditioning is a per-block scale/shift applied to both norm
//! outputs, produced from a shared sinusoidal time embedding.

use crate::bridge::{
    align_qkv, align_qkv_backward, shared_attention, shared_attention_backward, AlignerRefs,
    SharedAttnCache,
};
use crate::config::{BridgePlan, ExpertSpec};
use crate::data::{N_LATENT_TOKENS, PATCH_DIM};
use crate::error::{HbError, Result};
use crate::math::{
    self, layer_norm_backward, layer_norm_forward, linear_backward_input,
    linear_backward_params, linear_forward, sinusoidal_time, NormStats,
};
use crate::params::{Grads, LayoutBuilder, Params, SegId, TransposedWeights};
use crate::rng::Rng;
use crate::srt::SrtRefs;
use crate::und::UndCache;

#[derive(Clone, Debug)]
pub struct GenBlockRefs {
    pub ln1_g: SegId,
    pub ln1_b: SegId,
    pub wq: SegId,
    pub wk: SegId,
    pub wv: SegId,
    pub wo: SegId,
    pub ln2_g: SegId,
    pub ln2_b: SegId,
    pub w1: SegId,
    pub b1: SegId,
    pub w2: SegId,
    pub b2: SegId,
    pub tmod_w: SegId,
    pub tmod_b: SegId,
}

#[derive(Clone, Debug)]
pub struct GenRefs {
    pub n_blocks: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_srt: usize,
    pub seq_len: usize,
    pub patch_w: SegId,
    pub patch_b: SegId,
    pub pos_emb: SegId,
    pub time_w1: SegId,
    pub time_b1: SegId,
    pub time_w2: SegId,
    pub time_b2: SegId,
    pub blocks: Vec<GenBlockRefs>,
    pub vel_w: SegId,
    pub vel_b: SegId,
    pub all_segs: Vec<SegId>,
}

/// Everything a bridged forward needs to know about the other expert.
pub struct BridgeCtx<'a> {
    pub plan: &'a BridgePlan,
    pub aligners: &'a [AlignerRefs],
    pub n_heads_und: usize,
    pub d_und: usize,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub velocity: Vec<f64>,
    pub srt_out: Vec<f64>,
    /// Final hidden states of the latent tokens, before the velocity head.
    pub final_latent: Vec<f64>,
}

enum RouteCache {
    SelfAttn {
        ctx: Vec<f64>,
        aw: SharedAttnCache,
    },
    Bridged {
        und_layer: usize,
        aligner_slot: usize,
        qa: Vec<f64>,
        ka: Vec<f64>,
        va: Vec<f64>,
        out_u: Vec<f64>,
        back: Vec<f64>,
        aw: SharedAttnCache,
    },
}

struct BlockCache {
    x_in: Vec<f64>,
    ln1: NormStats,
    a: Vec<f64>,
    a_mod: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    route: RouteCache,
    x_mid: Vec<f64>,
    ln2: NormStats,
    m: Vec<f64>,
    m_mod: Vec<f64>,
    h1: Vec<f64>,
    h1a: Vec<f64>,
    scale: Vec<f64>,
}

pub struct GenFwdCache {
    sin_feats: Vec<f64>,
    t_h1: Vec<f64>,
    t_h1a: Vec<f64>,
    t_emb: Vec<f64>,
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
}

impl GenRefs {
    pub fn build(lb: &mut LayoutBuilder, spec: &ExpertSpec, plan: &BridgePlan, n_srt: usize) -> GenRefs {
        let d = spec.d_model;
        let n_blocks = plan.projector_depth + plan.aligned_count;
        debug_assert_eq!(n_blocks, spec.n_layers);
        let seq_len = N_LATENT_TOKENS + n_srt;
        let mut all = Vec::new();
        let push = |lb: &mut LayoutBuilder, all: &mut Vec<SegId>, name: String, r: usize, c: usize| {
            let id = lb.push(name, r, c);
            all.push(id);
            id
        };
        let patch_w = push(lb, &mut all, "gen.patch.w".into(), PATCH_DIM, d);
        let patch_b = push(lb, &mut all, "gen.patch.b".into(), 1, d);
        let pos_emb = push(lb, &mut all, "gen.pos_emb".into(), seq_len, d);
        let time_w1 = push(lb, &mut all, "gen.time.w1".into(), d, d);
        let time_b1 = push(lb, &mut all, "gen.time.b1".into(), 1, d);
        let time_w2 = push(lb, &mut all, "gen.time.w2".into(), d, d);
        let time_b2 = push(lb, &mut all, "gen.time.b2".into(), 1, d);
        let mut blocks = Vec::with_capacity(n_blocks);
        for l in 0..n_blocks {
            let p = format!("gen.block{l}");
            blocks.push(GenBlockRefs {
                ln1_g: push(lb, &mut all, format!("{p}.ln1.g"), 1, d),
                ln1_b: push(lb, &mut all, format!("{p}.ln1.b"), 1, d),
                wq: push(lb, &mut all, format!("{p}.attn.wq"), d, d),
                wk: push(lb, &mut all, format!("{p}.attn.wk"), d, d),
                wv: push(lb, &mut all, format!("{p}.attn.wv"), d, d),
                wo: push(lb, &mut all, format!("{p}.attn.wo"), d, d),
                ln2_g: push(lb, &mut all, format!("{p}.ln2.g"), 1, d),
                ln2_b: push(lb, &mut all, format!("{p}.ln2.b"), 1, d),
                w1: push(lb, &mut all, format!("{p}.ffn.w1"), d, spec.d_ff),
                b1: push(lb, &mut all, format!("{p}.ffn.b1"), 1, spec.d_ff),
                w2: push(lb, &mut all, format!("{p}.ffn.w2"), spec.d_ff, d),
                b2: push(lb, &mut all, format!("{p}.ffn.b2"), 1, d),
                tmod_w: push(lb, &mut all, format!("{p}.tmod.w"), d, 2 * d),
                tmod_b: push(lb, &mut all, format!("{p}.tmod.b"), 1, 2 * d),
            });
        }
        let vel_w = push(lb, &mut all, "gen.vel_head.w".into(), d, PATCH_DIM);
        let vel_b = push(lb, &mut all, "gen.vel_head.b".into(), 1, PATCH_DIM);
        GenRefs {
            n_blocks,
            d,
            n_heads: spec.n_heads,
            d_ff: spec.d_ff,
            n_srt,
            seq_len,
            patch_w,
            patch_b,
            pos_emb,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            vel_w,
            vel_b,
            all_segs: all,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut Rng) {
        let d = self.d;
        rng.fill_normal(params.seg_mut(self.patch_w), 1.0 / (PATCH_DIM as f64).sqrt());
        rng.fill_normal(params.seg_mut(self.pos_emb), 0.02);
        rng.fill_normal(params.seg_mut(self.time_w1), 1.0 / (d as f64).sqrt());
        rng.fill_normal(params.seg_mut(self.time_w2), 1.0 / (d as f64).sqrt());
        for b in &self.blocks {
            params.seg_mut(b.ln1_g).fill(1.0);
            for w in [b.wq, b.wk, b.wv, b.wo] {
                rng.fill_normal(params.seg_mut(w), 1.0 / (d as f64).sqrt());
            }
            params.seg_mut(b.ln2_g).fill(1.0);
            rng.fill_normal(params.seg_mut(b.w1), 1.0 / (d as f64).sqrt());
            rng.fill_normal(params.seg_mut(b.w2), 1.0 / (self.d_ff as f64).sqrt());
            // Small but nonzero: modulation starts near identity while the
            // timestep is visible at every depth from step one.
            rng.fill_normal(params.seg_mut(b.tmod_w), 0.02);
        }
        // Small head init keeps the initial velocity near zero so early
        // steps are spent on structure rather than unwinding a large
        // random output.
        rng.fill_normal(params.seg_mut(self.vel_w), 0.02);
    }

    fn time_embedding(&self, params: &Params, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut sin_feats = vec![0.0; d];
        sinusoidal_time(t, d, &mut sin_feats);
        let mut t_h1 = vec![0.0; d];
        linear_forward(&sin_feats, params.seg(self.time_w1), Some(params.seg(self.time_b1)), &mut t_h1, 1, d, d);
        let mut t_h1a = vec![0.0; d];
        math::gelu_forward(&t_h1, &mut t_h1a);
        let mut t_emb = vec![0.0; d];
        linear_forward(&t_h1a, params.seg(self.time_w2), Some(params.seg(self.time_b2)), &mut t_emb, 1, d, d);
        (sin_feats, t_h1, t_h1a, t_emb)
    }

    /// Denoising forward pass.
    ///
    /// `disconnect` severs the bridge at one aligned-layer index, making that
    /// layer behave exactly like a non-bridged one (used by the ablation
    /// analyzer). `cache` may be `None` only if no bridged layer will engage.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        params: &Params,
        bridge: &BridgeCtx,
        und_cache: Option<&UndCache>,
        srt: &SrtRefs,
        x_t: &[f64],
        t: f64,
        disconnect: Option<usize>,
        want_cache: bool,
    ) -> Result<(GenOutput, Option<GenFwdCache>)> {
        let d = self.d;
        let seq = self.seq_len;
        if x_t.len() != N_LATENT_TOKENS * PATCH_DIM {
            return Err(HbError::Input(format!(
                "latent tokens must be {} x {}, got {} values",
                N_LATENT_TOKENS,
                PATCH_DIM,
                x_t.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(HbError::Input(format!("time {t} outside [0, 1]")));
        }

        let (sin_feats, t_h1, t_h1a, t_emb) = self.time_embedding(params, t);

        // Token assembly: embedded patches then SRT tokens, plus positions.
        let mut x = vec![0.0; seq * d];
        linear_forward(
            x_t,
            params.seg(self.patch_w),
            Some(params.seg(self.patch_b)),
            &mut x[..N_LATENT_TOKENS * d],
            N_LATENT_TOKENS,
            PATCH_DIM,
            d,
        );
        x[N_LATENT_TOKENS * d..].copy_from_slice(params.seg(srt.tokens));
        math::axpy(1.0, params.seg(self.pos_emb), &mut x);

        let mut block_caches = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            let aligned_idx = bi.checked_sub(bridge.plan.projector_depth);
            let bridged_here = aligned_idx
                .map(|ai| bridge.plan.is_bridged_gen_layer(ai) && disconnect != Some(ai))
                .unwrap_or(false);

            let x_in = x;
            // Per-block modulation from the shared time embedding.
            let mut mod_out = vec![0.0; 2 * d];
            linear_forward(&t_emb, params.seg(b.tmod_w), Some(params.seg(b.tmod_b)), &mut mod_out, 1, d, 2 * d);
            let (scale, shift) = mod_out.split_at(d);

            let mut a = vec![0.0; seq * d];
            let mut ln1 = NormStats::default();
            layer_norm_forward(&x_in, params.seg(b.ln1_g), params.seg(b.ln1_b), &mut a, &mut ln1, seq, d);
            let mut a_mod = vec![0.0; seq * d];
            for r in 0..seq {
                for j in 0..d {
                    a_mod[r * d + j] = a[r * d + j] * (1.0 + scale[j]) + shift[j];
                }
            }

            let mut q = vec![0.0; seq * d];
            let mut k = vec![0.0; seq * d];
            let mut v = vec![0.0; seq * d];
            linear_forward(&a_mod, params.seg(b.wq), None, &mut q, seq, d, d);
            linear_forward(&a_mod, params.seg(b.wk), None, &mut k, seq, d, d);
            linear_forward(&a_mod, params.seg(b.wv), None, &mut v, seq, d, d);

            let (wo_input, route) = if bridged_here {
                let ai = aligned_idx.unwrap();
                let und_layer = bridge.plan.und_layer_for_gen(ai).unwrap();
                let slot = bridge.plan.aligner_slot(ai).unwrap();
                let aligner = &bridge.aligners[slot];
                let cache = und_cache.ok_or_else(|| {
                    HbError::Input("bridged forward requires an understanding cache".into())
                })?;
                let (qa, ka, va) = align_qkv(params, aligner, &q, &k, &v, seq)?;
                let (out_u, aw) = shared_attention(
                    &qa,
                    &ka,
                    &va,
                    &cache.keys[und_layer],
                    &cache.values[und_layer],
                    bridge.n_heads_und,
                    bridge.d_und,
                )?;
                let mut back = vec![0.0; seq * d];
                linear_forward(&out_u, params.seg(aligner.wo_back), None, &mut back, seq, bridge.d_und, d);
                (
                    back.clone(),
                    RouteCache::Bridged {
                        und_layer,
                        aligner_slot: slot,
                        qa,
                        ka,
                        va,
                        out_u,
                        back,
                        aw,
                    },
                )
            } else {
                let (ctx, aw) = shared_attention(&q, &k, &v, &[], &[], self.n_heads, d)?;
                (ctx.clone(), RouteCache::SelfAttn { ctx, aw })
            };

            let mut attn_out = vec![0.0; seq * d];
            linear_forward(&wo_input, params.seg(b.wo), None, &mut attn_out, seq, d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let mut m = vec![0.0; seq * d];
            let mut ln2 = NormStats::default();
            layer_norm_forward(&x_mid, params.seg(b.ln2_g), params.seg(b.ln2_b), &mut m, &mut ln2, seq, d);
            let mut m_mod = vec![0.0; seq * d];
            for r in 0..seq {
                for j in 0..d {
                    m_mod[r * d + j] = m[r * d + j] * (1.0 + scale[j]) + shift[j];
                }
            }
            let mut h1 = vec![0.0; seq * self.d_ff];
            linear_forward(&m_mod, params.seg(b.w1), Some(params.seg(b.b1)), &mut h1, seq, d, self.d_ff);
            let mut h1a = vec![0.0; seq * self.d_ff];
            math::gelu_forward(&h1, &mut h1a);
            let mut ffn = vec![0.0; seq * d];
            linear_forward(&h1a, params.seg(b.w2), Some(params.seg(b.b2)), &mut ffn, seq, self.d_ff, d);
            x = x_mid.iter().zip(&ffn).map(|(a, b)| a + b).collect();

            if want_cache {
                block_caches.push(BlockCache {
                    x_in,
                    ln1,
                    a,
                    a_mod,
                    q,
                    k,
                    v,
                    route,
                    x_mid,
                    ln2,
                    m,
                    m_mod,
                    h1,
                    h1a,
                    scale: scale.to_vec(),
                });
            }
        }

        let mut velocity = vec![0.0; N_LATENT_TOKENS * PATCH_DIM];
        linear_forward(
            &x[..N_LATENT_TOKENS * d],
            params.seg(self.vel_w),
            Some(params.seg(self.vel_b)),
            &mut velocity,
            N_LATENT_TOKENS,
            d,
            PATCH_DIM,
        );
        let output = GenOutput {
            velocity,
            srt_out: x[N_LATENT_TOKENS * d..].to_vec(),
            final_latent: x[..N_LATENT_TOKENS * d].to_vec(),
        };
        let cache = want_cache.then(|| GenFwdCache {
            sin_feats,
            t_h1,
            t_h1a,
            t_emb,
            blocks: block_caches,
            x_final: x,
        });
        Ok((output, cache))
    }

    /// Backward pass. `d_velocity` and `d_srt_out` carry the loss gradients;
    /// gradients accumulate into `grads` for the generative blocks, the
    /// aligners, the SRT token bank and the heads. Nothing flows into the
    /// understanding cache.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &Params,
        tw: &TransposedWeights,
        bridge: &BridgeCtx,
        und_cache: Option<&UndCache>,
        srt: &SrtRefs,
        x_t: &[f64],
        fwd: &GenFwdCache,
        d_velocity: &[f64],
        d_srt_out: &[f64],
        grads: &mut Grads,
    ) -> Result<()> {
        let d = self.d;
        let seq = self.seq_len;

        let mut dx = vec![0.0; seq * d];
        {
            let (dw, db) = grads.seg_pair_mut(self.vel_w, self.vel_b);
            linear_backward_params(
                &fwd.x_final[..N_LATENT_TOKENS * d],
                d_velocity,
                dw,
                Some(db),
                N_LATENT_TOKENS,
                d,
                PATCH_DIM,
            );
        }
        linear_backward_input(
            d_velocity,
            tw.get(self.vel_w),
            &mut dx[..N_LATENT_TOKENS * d],
            N_LATENT_TOKENS,
            d,
            PATCH_DIM,
        );
        dx[N_LATENT_TOKENS * d..]
            .iter_mut()
            .zip(d_srt_out)
            .for_each(|(a, b)| *a += b);

        let mut d_t_emb = vec![0.0; d];

        for (bi, b) in self.blocks.iter().enumerate().rev() {
            let lc = &fwd.blocks[bi];
            let scale = &lc.scale;

            // FFN branch.
            let mut d_h1a = vec![0.0; seq * self.d_ff];
            {
                let (dw, db) = grads.seg_pair_mut(b.w2, b.b2);
                linear_backward_params(&lc.h1a, &dx, dw, Some(db), seq, self.d_ff, d);
            }
            linear_backward_input(&dx, tw.get(b.w2), &mut d_h1a, seq, self.d_ff, d);
            let mut d_h1 = vec![0.0; seq * self.d_ff];
            math::gelu_backward(&d_h1a, &lc.h1, &mut d_h1);
            let mut d_m_mod = vec![0.0; seq * d];
            {
                let (dw, db) = grads.seg_pair_mut(b.w1, b.b1);
                linear_backward_params(&lc.m_mod, &d_h1, dw, Some(db), seq, d, self.d_ff);
            }
            linear_backward_input(&d_h1, tw.get(b.w1), &mut d_m_mod, seq, d, self.d_ff);

            // Undo the modulation on the FFN norm.
            let mut d_scale = vec![0.0; d];
            let mut d_shift = vec![0.0; d];
            let mut d_m = vec![0.0; seq * d];
            for r in 0..seq {
                for j in 0..d {
                    let g = d_m_mod[r * d + j];
                    d_m[r * d + j] = g * (1.0 + scale[j]);
                    d_scale[j] += g * lc.m[r * d + j];
                    d_shift[j] += g;
                }
            }
            {
                let (dg, db) = grads.seg_pair_mut(b.ln2_g, b.ln2_b);
                layer_norm_backward(&d_m, &lc.x_mid, params.seg(b.ln2_g), &lc.ln2, &mut dx, dg, db, seq, d);
            }

            // Attention branch.
            let mut d_wo_input = vec![0.0; seq * d];
            let wo_input = match &lc.route {
                RouteCache::SelfAttn { ctx, .. } => ctx,
                RouteCache::Bridged { back, .. } => back,
            };
            linear_backward_params(wo_input, &dx, grads.seg_mut(b.wo), None, seq, d, d);
            linear_backward_input(&dx, tw.get(b.wo), &mut d_wo_input, seq, d, d);

            let mut dq = vec![0.0; seq * d];
            let mut dk = vec![0.0; seq * d];
            let mut dv = vec![0.0; seq * d];
            match &lc.route {
                RouteCache::SelfAttn { aw, .. } => {
                    shared_attention_backward(
                        &d_wo_input,
                        &lc.q,
                        &lc.k,
                        &lc.v,
                        &[],
                        &[],
                        aw,
                        self.n_heads,
                        d,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                }
                RouteCache::Bridged {
                    und_layer,
                    aligner_slot,
                    qa,
                    ka,
                    va,
                    out_u,
                    aw,
                    ..
                } => {
                    let aligner = &bridge.aligners[*aligner_slot];
                    let cache = und_cache.ok_or_else(|| {
                        HbError::Internal("bridged backward without understanding cache".into())
                    })?;
                    let du = bridge.d_und;
                    let mut d_out_u = vec![0.0; seq * du];
                    linear_backward_params(out_u, &d_wo_input, grads.seg_mut(aligner.wo_back), None, seq, du, d);
                    linear_backward_input(&d_wo_input, tw.get(aligner.wo_back), &mut d_out_u, seq, du, d);

                    let mut dqa = vec![0.0; seq * du];
                    let mut dka = vec![0.0; seq * du];
                    let mut dva = vec![0.0; seq * du];
                    shared_attention_backward(
                        &d_out_u,
                        qa,
                        ka,
                        va,
                        &cache.keys[*und_layer],
                        &cache.values[*und_layer],
                        aw,
                        bridge.n_heads_und,
                        du,
                        &mut dqa,
                        &mut dka,
                        &mut dva,
                    );
                    align_qkv_backward(
                        tw, aligner, &lc.q, &lc.k, &lc.v, &dqa, &dka, &dva, seq, &mut dq, &mut dk,
                        &mut dv, grads,
                    );
                }
            }

            let mut d_a_mod = vec![0.0; seq * d];
            linear_backward_params(&lc.a_mod, &dq, grads.seg_mut(b.wq), None, seq, d, d);
            linear_backward_input(&dq, tw.get(b.wq), &mut d_a_mod, seq, d, d);
            linear_backward_params(&lc.a_mod, &dk, grads.seg_mut(b.wk), None, seq, d, d);
            linear_backward_input(&dk, tw.get(b.wk), &mut d_a_mod, seq, d, d);
            linear_backward_params(&lc.a_mod, &dv, grads.seg_mut(b.wv), None, seq, d, d);
            linear_backward_input(&dv, tw.get(b.wv), &mut d_a_mod, seq, d, d);

            let mut d_a = vec![0.0; seq * d];
            for r in 0..seq {
                for j in 0..d {
                    let g = d_a_mod[r * d + j];
                    d_a[r * d + j] = g * (1.0 + scale[j]);
                    d_scale[j] += g * lc.a[r * d + j];
                    d_shift[j] += g;
                }
            }
            {
                let (dg, db) = grads.seg_pair_mut(b.ln1_g, b.ln1_b);
                layer_norm_backward(&d_a, &lc.x_in, params.seg(b.ln1_g), &lc.ln1, &mut dx, dg, db, seq, d);
            }

            // Modulation affine back to the time embedding.
            let mut d_mod_out = vec![0.0; 2 * d];
            d_mod_out[..d].copy_from_slice(&d_scale);
            d_mod_out[d..].copy_from_slice(&d_shift);
            {
                let (dw, db) = grads.seg_pair_mut(b.tmod_w, b.tmod_b);
                linear_backward_params(&fwd.t_emb, &d_mod_out, dw, Some(db), 1, d, 2 * d);
            }
            linear_backward_input(&d_mod_out, tw.get(b.tmod_w), &mut d_t_emb, 1, d, 2 * d);
        }

        // Time MLP.
        {
            let mut d_t_h1a = vec![0.0; d];
            {
                let (dw, db) = grads.seg_pair_mut(self.time_w2, self.time_b2);
                linear_backward_params(&fwd.t_h1a, &d_t_emb, dw, Some(db), 1, d, d);
            }
            linear_backward_input(&d_t_emb, tw.get(self.time_w2), &mut d_t_h1a, 1, d, d);
            let mut d_t_h1 = vec![0.0; d];
            math::gelu_backward(&d_t_h1a, &fwd.t_h1, &mut d_t_h1);
            let (dw, db) = grads.seg_pair_mut(self.time_w1, self.time_b1);
            linear_backward_params(&fwd.sin_feats, &d_t_h1, dw, Some(db), 1, d, d);
        }

        // Embeddings: patches, SRT tokens, positions.
        {
            let (dw, db) = grads.seg_pair_mut(self.patch_w, self.patch_b);
            linear_backward_params(
                x_t,
                &dx[..N_LATENT_TOKENS * d],
                dw,
                Some(db),
                N_LATENT_TOKENS,
                PATCH_DIM,
                d,
            );
        }
        math::axpy(1.0, &dx[N_LATENT_TOKENS * d..], grads.seg_mut(srt.tokens));
        math::axpy(1.0, &dx, grads.seg_mut(self.pos_emb));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{resolve_bridge_plan, BridgeSpec, FusionMode};
    use crate::params::LayoutBuilder;
    use crate::und::UndRefs;

    struct Fixture {
        und: UndRefs,
        gen: GenRefs,
        srt: SrtRefs,
        aligners: Vec<AlignerRefs>,
        plan: BridgePlan,
        params: Params,
    }

    fn fixture(skip_front: usize, skip_back: usize, decoupled: bool) -> Fixture {
        let und_spec = ExpertSpec {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: Some(16),
            max_seq: 8,
        };
        let gen_spec = ExpertSpec {
            n_layers: 5,
            d_model: 24,
            n_heads: 4,
            d_ff: 48,
            vocab_size: None,
            max_seq: 20,
        };
        let bspec = BridgeSpec {
            skip_front,
            skip_back,
            fusion_mode: FusionMode::Deep,
            decoupled,
        };
        let plan = resolve_bridge_plan(&und_spec, &gen_spec, &bspec).unwrap();
        let mut lb = LayoutBuilder::new();
        let und = UndRefs::build(&mut lb, &und_spec);
        let gen = GenRefs::build(&mut lb, &gen_spec, &plan, 4);
        let aligners: Vec<AlignerRefs> = plan
            .bridged
            .iter()
            .map(|&(_, g)| AlignerRefs::build(&mut lb, g, gen_spec.d_model, und_spec.d_model))
            .collect();
        let srt = SrtRefs::build(&mut lb, 4, gen_spec.d_model, 16);
        let mut params = Params::zeros(lb.finish());
        let mut rng = Rng::seeded(33);
        und.init(&mut params, &mut rng);
        gen.init(&mut params, &mut rng);
        for a in &aligners {
            a.init(&mut params, &mut rng);
        }
        srt.init(&mut params, &mut rng);
        Fixture {
            und,
            gen,
            srt,
            aligners,
            plan,
            params,
        }
    }

    fn bridge_ctx<'a>(f: &'a Fixture) -> BridgeCtx<'a> {
        BridgeCtx {
            plan: &f.plan,
            aligners: &f.aligners,
            n_heads_und: f.und.n_heads,
            d_und: f.und.d,
        }
    }

    fn sample_inputs(seed: u64) -> (Vec<f64>, Vec<u16>) {
        let mut rng = Rng::seeded(seed);
        let mut x_t = vec![0.0; N_LATENT_TOKENS * PATCH_DIM];
        rng.fill_normal(&mut x_t, 1.0);
        (x_t, vec![0, 3, 7, 11, 14, 1])
    }

    #[test]
    fn velocity_has_latent_shape_and_forward_is_deterministic() {
        let f = fixture(1, 1, false);
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(5);
        let cache = f.und.encode(&f.params, &tokens).unwrap();
        let (o1, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.4, None, false)
            .unwrap();
        let (o2, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.4, None, false)
            .unwrap();
        assert_eq!(o1.velocity.len(), x_t.len());
        assert_eq!(o1.srt_out.len(), 4 * f.gen.d);
        assert_eq!(o1.velocity, o2.velocity);
        assert_eq!(o1.srt_out, o2.srt_out);
    }

    #[test]
    fn decoupled_plan_never_touches_the_cache() {
        let f = fixture(2, 1, true);
        assert!(f.plan.bridged.is_empty());
        let ctx = bridge_ctx(&f);
        let (x_t, _) = sample_inputs(6);
        // No cache supplied at all: must still run.
        let (out, _) = f
            .gen
            .forward(&f.params, &ctx, None, &f.srt, &x_t, 0.9, None, false)
            .unwrap();
        assert!(math::all_finite(&out.velocity));
    }

    #[test]
    fn time_matters_at_random_init() {
        let f = fixture(1, 1, false);
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(7);
        let cache = f.und.encode(&f.params, &tokens).unwrap();
        let (o0, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.0, None, false)
            .unwrap();
        let (o1, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 1.0, None, false)
            .unwrap();
        let max_diff = o0
            .velocity
            .iter()
            .zip(&o1.velocity)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "t had no effect");
    }

    #[test]
    fn bridge_locality_perturbation_only_matters_at_bridged_layers() {
        let f = fixture(1, 1, false);
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(8);
        let cache = f.und.encode(&f.params, &tokens).unwrap();
        let (base, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.3, None, false)
            .unwrap();

        for layer in 0..f.und.n_layers {
            let mut perturbed = cache.clone();
            for v in perturbed.keys[layer].iter_mut() {
                *v *= 2.0;
            }
            for v in perturbed.values[layer].iter_mut() {
                *v += 0.5;
            }
            let (out, _) = f
                .gen
                .forward(&f.params, &ctx, Some(&perturbed), &f.srt, &x_t, 0.3, None, false)
                .unwrap();
            let changed = out
                .velocity
                .iter()
                .zip(&base.velocity)
                .any(|(a, b)| a != b);
            let is_bridged = f.plan.bridged.iter().any(|&(u, _)| u == layer);
            assert_eq!(changed, is_bridged, "layer {layer}");
        }
    }

    #[test]
    fn full_attention_is_permutation_equivariant_over_latents() {
        let f = fixture(1, 1, false);
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(9);
        let cache = f.und.encode(&f.params, &tokens).unwrap();
        let (base, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.6, None, false)
            .unwrap();

        // Reverse latent order, permuting the position rows with the tokens.
        let d = f.gen.d;
        let mut params2 = f.params.clone();
        {
            let pos = params2.seg_mut(f.gen.pos_emb);
            for i in 0..N_LATENT_TOKENS / 2 {
                let j = N_LATENT_TOKENS - 1 - i;
                for c in 0..d {
                    pos.swap(i * d + c, j * d + c);
                }
            }
        }
        let mut x_rev = x_t.clone();
        for i in 0..N_LATENT_TOKENS / 2 {
            let j = N_LATENT_TOKENS - 1 - i;
            for c in 0..PATCH_DIM {
                x_rev.swap(i * PATCH_DIM + c, j * PATCH_DIM + c);
            }
        }
        let (rev, _) = f
            .gen
            .forward(&params2, &ctx, Some(&cache), &f.srt, &x_rev, 0.6, None, false)
            .unwrap();
        for i in 0..N_LATENT_TOKENS {
            let j = N_LATENT_TOKENS - 1 - i;
            for c in 0..PATCH_DIM {
                let a = base.velocity[i * PATCH_DIM + c];
                let b = rev.velocity[j * PATCH_DIM + c];
                assert!((a - b).abs() < 1e-9, "row {i} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn disconnect_equals_plan_without_that_layer() {
        let f = fixture(0, 0, false); // all three aligned layers bridged
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(10);
        let cache = f.und.encode(&f.params, &tokens).unwrap();
        let (disc, _) = f
            .gen
            .forward(&f.params, &ctx, Some(&cache), &f.srt, &x_t, 0.5, Some(1), false)
            .unwrap();

        // Same topology expressed through a plan that simply omits layer 1.
        let mut plan2 = f.plan.clone();
        plan2.bridged.retain(|&(_, g)| g != 1);
        // Aligner slots shift when the plan shrinks, so rebuild the context
        // with the same aligner list but the pruned plan. Slot lookup is by
        // position in `bridged`, so drop the matching aligner too.
        let mut aligners2 = f.aligners.clone();
        aligners2.remove(1);
        let ctx2 = BridgeCtx {
            plan: &plan2,
            aligners: &aligners2,
            n_heads_und: f.und.n_heads,
            d_und: f.und.d,
        };
        let (pruned, _) = f
            .gen
            .forward(&f.params, &ctx2, Some(&cache), &f.srt, &x_t, 0.5, None, false)
            .unwrap();
        assert_eq!(disc.velocity, pruned.velocity);
        assert_eq!(disc.srt_out, pruned.srt_out);
    }

    #[test]
    fn gradients_match_finite_differences_across_roles() {
        let f = fixture(1, 0, false);
        let ctx = bridge_ctx(&f);
        let (x_t, tokens) = sample_inputs(11);
        let cache = f.und.encode(&f.params, &tokens).unwrap();

        // Scalar loss: weighted sums of both outputs.
        let mut wrng = Rng::seeded(99);
        let mut wv = vec![0.0; N_LATENT_TOKENS * PATCH_DIM];
        let mut ws = vec![0.0; 4 * f.gen.d];
        wrng.fill_normal(&mut wv, 1.0);
        wrng.fill_normal(&mut ws, 1.0);

        let loss = |params: &Params| -> f64 {
            let (o, _) = f
                .gen
                .forward(params, &ctx, Some(&cache), &f.srt, &x_t, 0.7, None, false)
                .unwrap();
            math::dot(&o.velocity, &wv) + math::dot(&o.srt_out, &ws)
        };

        let mut params = f.params.clone();
        let tw = TransposedWeights::build(&params);
        let (_, fwd) = f
            .gen
            .forward(&params, &ctx, Some(&cache), &f.srt, &x_t, 0.7, None, true)
            .unwrap();
        let mut grads = Grads::zeros(params.layout.clone());
        f.gen
            .backward(
                &params,
                &tw,
                &ctx,
                Some(&cache),
                &f.srt,
                &x_t,
                &fwd.unwrap(),
                &wv,
                &ws,
                &mut grads,
            )
            .unwrap();

        // Sample coordinates from every trainable role.
        let mut targets: Vec<SegId> = Vec::new();
        targets.extend([f.gen.patch_w, f.gen.pos_emb, f.gen.time_w1, f.gen.time_w2, f.gen.vel_w, f.gen.vel_b]);
        for b in [&f.gen.blocks[0], &f.gen.blocks[2], &f.gen.blocks[4]] {
            targets.extend([b.wq, b.wo, b.w1, b.b2, b.ln1_g, b.tmod_w, b.tmod_b]);
        }
        for a in &f.aligners {
            targets.extend([a.wq, a.wk, a.wv, a.wo_back]);
        }
        targets.extend([f.srt.tokens]);

        let eps = 1e-5;
        let mut rng = Rng::seeded(123);
        let mut worst = 0.0f64;
        for seg in targets {
            for _ in 0..3 {
                let len = params.layout.seg(seg).len();
                let idx = rng.below(len);
                let analytic = grads.seg(seg)[idx];
                let orig = params.seg(seg)[idx];
                params.seg_mut(seg)[idx] = orig + eps;
                let lp = loss(&params);
                params.seg_mut(seg)[idx] = orig - eps;
                let lm = loss(&params);
                params.seg_mut(seg)[idx] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "seg {} idx {idx}: analytic {analytic} numeric {num}",
                    params.layout.seg(seg).name
                );
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst {worst}");
    }
}
