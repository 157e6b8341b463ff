//! QKV alignment and shared attention between the two experts.
//!
//! At a bridged layer the generative expert's q/k/v are mapped by bias-free
//! linear aligners into the understanding width, attention runs in the
//! understanding expert's head geometry over the concatenation
//! `[understanding tokens || generative tokens]`, and the result is mapped
//! back to the generative width. Understanding tokens only ever contribute
//! keys and values; they receive no update from this exchange.

use crate::error::{HbError, Result};
use crate::math::{
    self, linear_backward_input, linear_backward_params, linear_forward, softmax_backward_row,
    softmax_row,
};
use crate::params::{Grads, LayoutBuilder, Params, SegId, TransposedWeights};
use crate::rng::Rng;

/// Per-bridged-layer alignment maps.
#[derive(Clone, Debug)]
pub struct AlignerRefs {
    pub d_gen: usize,
    pub d_und: usize,
    pub wq: SegId,
    pub wk: SegId,
    pub wv: SegId,
    pub wo_back: SegId,
    pub all_segs: Vec<SegId>,
}

impl AlignerRefs {
    /// `gen_layer` is the aligned-layer index this aligner serves; it only
    /// names the tensors.
    pub fn build(lb: &mut LayoutBuilder, gen_layer: usize, d_gen: usize, d_und: usize) -> AlignerRefs {
        let p = format!("bridge.align{gen_layer}");
        let wq = lb.push(format!("{p}.wq"), d_gen, d_und);
        let wk = lb.push(format!("{p}.wk"), d_gen, d_und);
        let wv = lb.push(format!("{p}.wv"), d_gen, d_und);
        let wo_back = lb.push(format!("{p}.wo_back"), d_und, d_gen);
        AlignerRefs {
            d_gen,
            d_und,
            wq,
            wk,
            wv,
            wo_back,
            all_segs: vec![wq, wk, wv, wo_back],
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut Rng) {
        let sg = 1.0 / (self.d_gen as f64).sqrt();
        for w in [self.wq, self.wk, self.wv] {
            rng.fill_normal(params.seg_mut(w), sg);
        }
        rng.fill_normal(params.seg_mut(self.wo_back), 1.0 / (self.d_und as f64).sqrt());
    }
}

/// Project generative q/k/v into the understanding width. Pure linear maps,
/// no bias, no nonlinearity.
pub fn align_qkv(
    params: &Params,
    a: &AlignerRefs,
    gq: &[f64],
    gk: &[f64],
    gv: &[f64],
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if gq.len() != n * a.d_gen || gk.len() != n * a.d_gen || gv.len() != n * a.d_gen {
        return Err(HbError::Input(format!(
            "align_qkv width mismatch: expected {} x {}",
            n, a.d_gen
        )));
    }
    let mut q = vec![0.0; n * a.d_und];
    let mut k = vec![0.0; n * a.d_und];
    let mut v = vec![0.0; n * a.d_und];
    linear_forward(gq, params.seg(a.wq), None, &mut q, n, a.d_gen, a.d_und);
    linear_forward(gk, params.seg(a.wk), None, &mut k, n, a.d_gen, a.d_und);
    linear_forward(gv, params.seg(a.wv), None, &mut v, n, a.d_gen, a.d_und);
    Ok((q, k, v))
}

/// Attention weights kept for the backward pass: one row of length
/// `und_len + gen_len` per generative query per head.
pub struct SharedAttnCache {
    pub aw: Vec<Vec<f64>>, // [head][gen_len * (und_len + gen_len)]
    pub und_len: usize,
    pub gen_len: usize,
}

/// Generative queries attend over `[und_k || gen_k]` with matching values.
/// Softmax spans the whole concatenated axis per head; there is no mask in
/// either direction. Runs in the understanding head geometry.
pub fn shared_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    und_k: &[f64],
    und_v: &[f64],
    n_heads: usize,
    d_und: usize,
) -> Result<(Vec<f64>, SharedAttnCache)> {
    if d_und % n_heads != 0 {
        return Err(HbError::Config(format!(
            "shared attention: d_und {d_und} not divisible by {n_heads} heads"
        )));
    }
    let gen_len = q.len() / d_und;
    let und_len = und_k.len() / d_und;
    debug_assert_eq!(k.len(), gen_len * d_und);
    debug_assert_eq!(v.len(), gen_len * d_und);
    debug_assert_eq!(und_v.len(), und_len * d_und);
    let hd = d_und / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let total = und_len + gen_len;

    let mut out = vec![0.0; gen_len * d_und];
    let mut aw_heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * hd;
        let mut aw = vec![0.0; gen_len * total];
        for i in 0..gen_len {
            let qi = &q[i * d_und + off..i * d_und + off + hd];
            {
                let row = &mut aw[i * total..(i + 1) * total];
                for (j, rv) in row.iter_mut().enumerate() {
                    let key = if j < und_len {
                        &und_k[j * d_und + off..j * d_und + off + hd]
                    } else {
                        let g = j - und_len;
                        &k[g * d_und + off..g * d_und + off + hd]
                    };
                    *rv = math::dot(qi, key) * scale;
                }
                softmax_row(row);
            }
            let oi = &mut out[i * d_und + off..i * d_und + off + hd];
            for j in 0..total {
                let w = aw[i * total + j];
                let val = if j < und_len {
                    &und_v[j * d_und + off..j * d_und + off + hd]
                } else {
                    let g = j - und_len;
                    &v[g * d_und + off..g * d_und + off + hd]
                };
                math::axpy(w, val, oi);
            }
        }
        aw_heads.push(aw);
    }
    Ok((
        out,
        SharedAttnCache {
            aw: aw_heads,
            und_len,
            gen_len,
        },
    ))
}

/// Backward of `shared_attention` with respect to the generative-side
/// q/k/v only. Gradients that land on the understanding expert's keys and
/// values are discarded: that expert is frozen and nothing trainable sits
/// upstream of its cache.
#[allow(clippy::too_many_arguments)]
pub fn shared_attention_backward(
    d_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    und_k: &[f64],
    und_v: &[f64],
    cache: &SharedAttnCache,
    n_heads: usize,
    d_und: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let _ = v;
    let gen_len = cache.gen_len;
    let und_len = cache.und_len;
    let total = und_len + gen_len;
    let hd = d_und / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    for h in 0..n_heads {
        let off = h * hd;
        let aw = &cache.aw[h];
        for i in 0..gen_len {
            let d_out_i = &d_out[i * d_und + off..i * d_und + off + hd];
            let row = &aw[i * total..(i + 1) * total];
            let mut d_aw = vec![0.0; total];
            for (j, dav) in d_aw.iter_mut().enumerate() {
                let val = if j < und_len {
                    &und_v[j * d_und + off..j * d_und + off + hd]
                } else {
                    let g = j - und_len;
                    &v[g * d_und + off..g * d_und + off + hd]
                };
                *dav = math::dot(d_out_i, val);
            }
            // dv for generative value rows.
            for j in und_len..total {
                let g = j - und_len;
                let dvg = &mut dv[g * d_und + off..g * d_und + off + hd];
                math::axpy(row[j], d_out_i, dvg);
            }
            let mut d_logits = vec![0.0; total];
            softmax_backward_row(row, &d_aw, &mut d_logits);
            {
                let dqi = &mut dq[i * d_und + off..i * d_und + off + hd];
                for (j, dl) in d_logits.iter().enumerate() {
                    let key = if j < und_len {
                        &und_k[j * d_und + off..j * d_und + off + hd]
                    } else {
                        let g = j - und_len;
                        &k[g * d_und + off..g * d_und + off + hd]
                    };
                    math::axpy(dl * scale, key, dqi);
                }
            }
            let qi = &q[i * d_und + off..i * d_und + off + hd];
            for (j, dl) in d_logits.iter().enumerate().skip(und_len) {
                let g = j - und_len;
                let dkg = &mut dk[g * d_und + off..g * d_und + off + hd];
                math::axpy(dl * scale, qi, dkg);
            }
        }
    }
}

/// Backward of `align_qkv`: accumulates aligner-weight gradients and the
/// gradients on the generative-width q/k/v.
#[allow(clippy::too_many_arguments)]
pub fn align_qkv_backward(
    params_tw: &TransposedWeights,
    a: &AlignerRefs,
    gq: &[f64],
    gk: &[f64],
    gv: &[f64],
    dq_a: &[f64],
    dk_a: &[f64],
    dv_a: &[f64],
    n: usize,
    d_gq: &mut [f64],
    d_gk: &mut [f64],
    d_gv: &mut [f64],
    grads: &mut Grads,
) {
    let (dg, du) = (a.d_gen, a.d_und);
    linear_backward_params(gq, dq_a, grads.seg_mut(a.wq), None, n, dg, du);
    linear_backward_input(dq_a, params_tw.get(a.wq), d_gq, n, dg, du);
    linear_backward_params(gk, dk_a, grads.seg_mut(a.wk), None, n, dg, du);
    linear_backward_input(dk_a, params_tw.get(a.wk), d_gk, n, dg, du);
    linear_backward_params(gv, dv_a, grads.seg_mut(a.wv), None, n, dg, du);
    linear_backward_input(dv_a, params_tw.get(a.wv), d_gv, n, dg, du);
}
