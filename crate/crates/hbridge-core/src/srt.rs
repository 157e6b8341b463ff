//! Semantic reconstruction tokens and their supervision target.
//!
//! The learnable tokens ride along the generative sequence; their final
//! states are projected and pulled, by cosine distance, toward pooled
//! features of the target pattern from a frozen encoder. At desk scale the
//! frozen encoder is a randomly initialized two-block transformer rather
//! than a pretrained ViT; what matters to the mechanism is that the target
//! is a fixed external embedding of the ground truth.

use crate::data::{patchify, N_LATENT_TOKENS, PATCH_DIM};
use crate::error::{HbError, Result};
use crate::math::{
    self, layer_norm_forward, linear_backward_input, linear_backward_params, linear_forward,
    softmax_row, NormStats,
};
use crate::params::{Grads, LayoutBuilder, Params, SegId, TransposedWeights};
use crate::rng::Rng;

/// Norm floor inside the cosine so zero vectors stay finite.
pub const COS_EPS: f64 = 1e-8;

/// The frozen encoder is seeded independently of any run seed so the target
/// embedding is the same fixed function across all experiments.
const VIT_PROXY_SEED: u64 = 0x56_49_54;

#[derive(Clone, Debug)]
pub struct SrtRefs {
    pub n_srt: usize,
    pub d_gen: usize,
    pub d_feat: usize,
    pub tokens: SegId,
    pub proj_w: SegId,
    pub all_segs: Vec<SegId>,
}

impl SrtRefs {
    pub fn build(lb: &mut LayoutBuilder, n_srt: usize, d_gen: usize, d_feat: usize) -> SrtRefs {
        let tokens = lb.push("srt.tokens", n_srt, d_gen);
        let proj_w = lb.push("srt.proj.w", d_gen, d_feat);
        SrtRefs {
            n_srt,
            d_gen,
            d_feat,
            tokens,
            proj_w,
            all_segs: vec![tokens, proj_w],
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut Rng) {
        rng.fill_normal(params.seg_mut(self.tokens), 0.02);
        rng.fill_normal(params.seg_mut(self.proj_w), 1.0 / (self.d_gen as f64).sqrt());
    }

    /// Mean cosine distance between projected SRT outputs and targets.
    pub fn loss(&self, params: &Params, srt_out: &[f64], target: &[f64]) -> Result<f64> {
        self.loss_impl(params, srt_out, target, None, 1.0)
    }

    /// Loss plus gradients: fills `d_srt_out` (assign) and accumulates the
    /// projection-head gradient, both scaled by `loss_scale`.
    pub fn loss_and_grads(
        &self,
        params: &Params,
        tw: &TransposedWeights,
        srt_out: &[f64],
        target: &[f64],
        loss_scale: f64,
        d_srt_out: &mut [f64],
        grads: &mut Grads,
    ) -> Result<f64> {
        self.loss_impl(params, srt_out, target, Some((tw, d_srt_out, grads)), loss_scale)
    }

    fn loss_impl(
        &self,
        params: &Params,
        srt_out: &[f64],
        target: &[f64],
        backward: Option<(&TransposedWeights, &mut [f64], &mut Grads)>,
        loss_scale: f64,
    ) -> Result<f64> {
        let n = self.n_srt;
        if srt_out.len() != n * self.d_gen || target.len() != n * self.d_feat {
            return Err(HbError::Input(format!(
                "srt loss shape mismatch: out {} target {}",
                srt_out.len(),
                target.len()
            )));
        }
        if !math::all_finite(srt_out) || !math::all_finite(target) {
            return Err(HbError::Divergence {
                step: 0,
                detail: "non-finite srt loss inputs".into(),
            });
        }

        let mut proj = vec![0.0; n * self.d_feat];
        linear_forward(srt_out, params.seg(self.proj_w), None, &mut proj, n, self.d_gen, self.d_feat);

        let df = self.d_feat;
        let mut loss = 0.0;
        let mut d_proj = vec![0.0; n * df];
        let want_grad = backward.is_some();
        for i in 0..n {
            let p = &proj[i * df..(i + 1) * df];
            let t = &target[i * df..(i + 1) * df];
            let np = math::dot(p, p).sqrt().max(COS_EPS);
            let nt = math::dot(t, t).sqrt().max(COS_EPS);
            let cos = math::dot(p, t) / (np * nt);
            loss += 1.0 - cos;
            if want_grad {
                // d(1 - cos)/dp = -t/(np*nt) + cos * p/np^2, averaged below.
                let dp = &mut d_proj[i * df..(i + 1) * df];
                let c1 = -1.0 / (np * nt);
                let c2 = cos / (np * np);
                for j in 0..df {
                    dp[j] = c1 * t[j] + c2 * p[j];
                }
            }
        }
        loss /= n as f64;

        if let Some((tw, d_srt_out, grads)) = backward {
            let scale = loss_scale / n as f64;
            for v in d_proj.iter_mut() {
                *v *= scale;
            }
            d_srt_out.fill(0.0);
            linear_backward_params(srt_out, &d_proj, grads.seg_mut(self.proj_w), None, n, self.d_gen, df);
            linear_backward_input(&d_proj, tw.get(self.proj_w), d_srt_out, n, self.d_gen, df);
        }
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
struct VitBlockRefs {
    ln1_g: SegId,
    ln1_b: SegId,
    wq: SegId,
    wk: SegId,
    wv: SegId,
    wo: SegId,
    ln2_g: SegId,
    ln2_b: SegId,
    w1: SegId,
    b1: SegId,
    w2: SegId,
    b2: SegId,
}

/// Frozen target-feature encoder: patch embedding, position table, two
/// full-attention blocks. Never trained, never updated.
#[derive(Clone, Debug)]
pub struct VitRefs {
    pub d_feat: usize,
    pub n_heads: usize,
    pub positions_enabled: bool,
    patch_w: SegId,
    patch_b: SegId,
    pos: SegId,
    blocks: Vec<VitBlockRefs>,
    pub all_segs: Vec<SegId>,
}

impl VitRefs {
    pub fn build(lb: &mut LayoutBuilder, d_feat: usize, n_heads: usize) -> VitRefs {
        let d = d_feat;
        let d_ff = 4 * d;
        let mut all = Vec::new();
        let push = |lb: &mut LayoutBuilder, all: &mut Vec<SegId>, name: String, r: usize, c: usize| {
            let id = lb.push(name, r, c);
            all.push(id);
            id
        };
        let patch_w = push(lb, &mut all, "vit.patch.w".into(), PATCH_DIM, d);
        let patch_b = push(lb, &mut all, "vit.patch.b".into(), 1, d);
        let pos = push(lb, &mut all, "vit.pos".into(), N_LATENT_TOKENS, d);
        let mut blocks = Vec::new();
        for l in 0..2 {
            let p = format!("vit.block{l}");
            blocks.push(VitBlockRefs {
                ln1_g: push(lb, &mut all, format!("{p}.ln1.g"), 1, d),
                ln1_b: push(lb, &mut all, format!("{p}.ln1.b"), 1, d),
                wq: push(lb, &mut all, format!("{p}.attn.wq"), d, d),
                wk: push(lb, &mut all, format!("{p}.attn.wk"), d, d),
                wv: push(lb, &mut all, format!("{p}.attn.wv"), d, d),
                wo: push(lb, &mut all, format!("{p}.attn.wo"), d, d),
                ln2_g: push(lb, &mut all, format!("{p}.ln2.g"), 1, d),
                ln2_b: push(lb, &mut all, format!("{p}.ln2.b"), 1, d),
                w1: push(lb, &mut all, format!("{p}.ffn.w1"), d, d_ff),
                b1: push(lb, &mut all, format!("{p}.ffn.b1"), 1, d_ff),
                w2: push(lb, &mut all, format!("{p}.ffn.w2"), d_ff, d),
                b2: push(lb, &mut all, format!("{p}.ffn.b2"), 1, d),
            });
        }
        VitRefs {
            d_feat,
            n_heads,
            positions_enabled: true,
            patch_w,
            patch_b,
            pos,
            blocks,
            all_segs: all,
        }
    }

    /// Seeded from a fixed constant: the encoder is the same function in
    /// every run, independent of training seeds.
    pub fn init(&self, params: &mut Params) {
        let mut rng = Rng::seeded(VIT_PROXY_SEED);
        let d = self.d_feat;
        rng.fill_normal(params.seg_mut(self.patch_w), 1.0 / (PATCH_DIM as f64).sqrt());
        rng.fill_normal(params.seg_mut(self.pos), 0.02);
        for b in &self.blocks {
            params.seg_mut(b.ln1_g).fill(1.0);
            for w in [b.wq, b.wk, b.wv, b.wo] {
                rng.fill_normal(params.seg_mut(w), 1.0 / (d as f64).sqrt());
            }
            params.seg_mut(b.ln2_g).fill(1.0);
            rng.fill_normal(params.seg_mut(b.w1), 1.0 / (d as f64).sqrt());
            rng.fill_normal(params.seg_mut(b.w2), 1.0 / (4.0 * d as f64).sqrt());
        }
        for id in &self.all_segs {
            params.set_frozen(*id, true);
        }
    }

    /// Encode all patches; bidirectional attention, no pooling yet.
    fn encode_patches(&self, params: &Params, pattern: &[f64]) -> Vec<f64> {
        let d = self.d_feat;
        let t_len = N_LATENT_TOKENS;
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let patches = patchify(pattern);

        let mut x = vec![0.0; t_len * d];
        linear_forward(&patches, params.seg(self.patch_w), Some(params.seg(self.patch_b)), &mut x, t_len, PATCH_DIM, d);
        if self.positions_enabled {
            math::axpy(1.0, params.seg(self.pos), &mut x);
        }

        let mut stats = NormStats::default();
        for b in &self.blocks {
            let mut a = vec![0.0; t_len * d];
            layer_norm_forward(&x, params.seg(b.ln1_g), params.seg(b.ln1_b), &mut a, &mut stats, t_len, d);
            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            linear_forward(&a, params.seg(b.wq), None, &mut q, t_len, d, d);
            linear_forward(&a, params.seg(b.wk), None, &mut k, t_len, d, d);
            linear_forward(&a, params.seg(b.wv), None, &mut v, t_len, d, d);
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..self.n_heads {
                let off = h * hd;
                for i in 0..t_len {
                    let mut logits = vec![0.0; t_len];
                    let qi = &q[i * d + off..i * d + off + hd];
                    for (j, lv) in logits.iter_mut().enumerate() {
                        let kj = &k[j * d + off..j * d + off + hd];
                        *lv = math::dot(qi, kj) * scale;
                    }
                    softmax_row(&mut logits);
                    let ci = &mut ctx[i * d + off..i * d + off + hd];
                    for (j, w) in logits.iter().enumerate() {
                        let vj = &v[j * d + off..j * d + off + hd];
                        math::axpy(*w, vj, ci);
                    }
                }
            }
            let mut attn_out = vec![0.0; t_len * d];
            linear_forward(&ctx, params.seg(b.wo), None, &mut attn_out, t_len, d, d);
            for (xv, av) in x.iter_mut().zip(&attn_out) {
                *xv += av;
            }

            let mut m = vec![0.0; t_len * d];
            layer_norm_forward(&x, params.seg(b.ln2_g), params.seg(b.ln2_b), &mut m, &mut stats, t_len, d);
            let d_ff = 4 * d;
            let mut h1 = vec![0.0; t_len * d_ff];
            linear_forward(&m, params.seg(b.w1), Some(params.seg(b.b1)), &mut h1, t_len, d, d_ff);
            let mut h1a = vec![0.0; t_len * d_ff];
            math::gelu_forward(&h1, &mut h1a);
            let mut ffn = vec![0.0; t_len * d];
            linear_forward(&h1a, params.seg(b.w2), Some(params.seg(b.b2)), &mut ffn, t_len, d_ff, d);
            for (xv, fv) in x.iter_mut().zip(&ffn) {
                *xv += fv;
            }
        }
        x
    }
}

/// 1-D adaptive average pooling over the patch sequence: bin `b` averages
/// rows `floor(b*P/n) .. floor((b+1)*P/n) - 1`.
pub fn adaptive_pool(features: &[f64], n_rows: usize, d: usize, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 || n_bins > n_rows {
        return Err(HbError::Config(format!(
            "adaptive pool: {n_bins} bins over {n_rows} rows"
        )));
    }
    let mut out = vec![0.0; n_bins * d];
    for b in 0..n_bins {
        let lo = b * n_rows / n_bins;
        let hi = (b + 1) * n_rows / n_bins;
        let inv = 1.0 / (hi - lo) as f64;
        let row = &mut out[b * d..(b + 1) * d];
        for r in lo..hi {
            math::axpy(inv, &features[r * d..(r + 1) * d], row);
        }
    }
    Ok(out)
}

/// Pooled target features for one pattern, shaped `n_srt x d_feat`.
pub fn extract_target_features(
    params: &Params,
    vit: &VitRefs,
    pattern: &[f64],
    n_srt: usize,
) -> Result<Vec<f64>> {
    let feats = vit.encode_patches(params, pattern);
    adaptive_pool(&feats, N_LATENT_TOKENS, vit.d_feat, n_srt)
}
