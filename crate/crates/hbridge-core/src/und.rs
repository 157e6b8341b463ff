//! Understanding expert: a causal pre-norm transformer over caption tokens.
//!
//! During bridge training it is frozen and acts purely as a feature source:
//! `encode` exposes the per-layer attention keys/values that bridged
//! generative layers read. Before that it can be pretrained as a tiny
//! language model so the frozen prior is nontrivial.

use crate::config::ExpertSpec;
use crate::error::{HbError, Result};
use crate::math::{
    self, layer_norm_backward, layer_norm_forward, linear_backward_input,
    linear_backward_params, linear_forward, softmax_backward_row, softmax_row, NormStats,
};
use crate::params::{Grads, LayoutBuilder, Params, SegId, TransposedWeights};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct UndBlockRefs {
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
}

#[derive(Clone, Debug)]
pub struct UndRefs {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub tok_emb: SegId,
    pub pos_emb: SegId,
    pub blocks: Vec<UndBlockRefs>,
    pub final_g: SegId,
    pub final_b: SegId,
    pub lm_head: SegId,
    /// Every segment owned by this expert, for freeze bookkeeping.
    pub all_segs: Vec<SegId>,
}

/// Per-layer keys/values plus final hidden states for one caption.
#[derive(Clone, Debug)]
pub struct UndCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub final_hidden: Vec<f64>,
    pub len: usize,
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: NormStats,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    aw: Vec<Vec<f64>>, // per head, T x T row-major, rows causal
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: NormStats,
    m: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct LmCache {
    layers: Vec<LayerCache>,
    x_last: Vec<f64>,
    lnf: NormStats,
    final_out: Vec<f64>,
    probs: Vec<f64>,
}

impl UndRefs {
    pub fn build(lb: &mut LayoutBuilder, spec: &ExpertSpec) -> UndRefs {
        let d = spec.d_model;
        let vocab = spec.vocab_size.expect("understanding expert has a vocabulary");
        let mut all = Vec::new();
        let push = |lb: &mut LayoutBuilder, all: &mut Vec<SegId>, name: String, r: usize, c: usize| {
            let id = lb.push(name, r, c);
            all.push(id);
            id
        };
        let tok_emb = push(lb, &mut all, "und.tok_emb".into(), vocab, d);
        let pos_emb = push(lb, &mut all, "und.pos_emb".into(), spec.max_seq, d);
        let mut blocks = Vec::with_capacity(spec.n_layers);
        for l in 0..spec.n_layers {
            let p = format!("und.block{l}");
            blocks.push(UndBlockRefs {
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
            });
        }
        let final_g = push(lb, &mut all, "und.final_ln.g".into(), 1, d);
        let final_b = push(lb, &mut all, "und.final_ln.b".into(), 1, d);
        let lm_head = push(lb, &mut all, "und.lm_head.w".into(), d, vocab);
        UndRefs {
            n_layers: spec.n_layers,
            d,
            n_heads: spec.n_heads,
            d_ff: spec.d_ff,
            vocab,
            max_seq: spec.max_seq,
            tok_emb,
            pos_emb,
            blocks,
            final_g,
            final_b,
            lm_head,
            all_segs: all,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut Rng) {
        let d = self.d;
        rng.fill_normal(params.seg_mut(self.tok_emb), 0.02);
        rng.fill_normal(params.seg_mut(self.pos_emb), 0.02);
        for b in &self.blocks {
            params.seg_mut(b.ln1_g).fill(1.0);
            for w in [b.wq, b.wk, b.wv, b.wo] {
                rng.fill_normal(params.seg_mut(w), 1.0 / (d as f64).sqrt());
            }
            params.seg_mut(b.ln2_g).fill(1.0);
            rng.fill_normal(params.seg_mut(b.w1), 1.0 / (d as f64).sqrt());
            rng.fill_normal(params.seg_mut(b.w2), 1.0 / (self.d_ff as f64).sqrt());
        }
        params.seg_mut(self.final_g).fill(1.0);
        rng.fill_normal(params.seg_mut(self.lm_head), 1.0 / (d as f64).sqrt());
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_seq {
            return Err(HbError::Input(format!(
                "caption length {} outside 1..={}",
                tokens.len(),
                self.max_seq
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(HbError::Input(format!(
                "token id {bad} out of vocabulary {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Causal encoding; returns per-layer K/V and final hidden states.
    pub fn encode(&self, params: &Params, tokens: &[u16]) -> Result<UndCache> {
        let (cache, _) = self.forward(params, tokens, false)?;
        Ok(cache)
    }

    fn forward(
        &self,
        params: &Params,
        tokens: &[u16],
        want_lm: bool,
    ) -> Result<(UndCache, Option<LmCache>)> {
        self.check_tokens(tokens)?;
        let d = self.d;
        let t_len = tokens.len();
        let n_heads = self.n_heads;
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &params.seg(self.tok_emb)[tok as usize * d..(tok as usize + 1) * d];
            let pe = &params.seg(self.pos_emb)[i * d..(i + 1) * d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let mut keys = Vec::with_capacity(self.n_layers);
        let mut values = Vec::with_capacity(self.n_layers);
        let mut layer_caches = Vec::new();

        for b in &self.blocks {
            let x_in = x.clone();
            let mut a = vec![0.0; t_len * d];
            let mut ln1 = NormStats::default();
            layer_norm_forward(&x, params.seg(b.ln1_g), params.seg(b.ln1_b), &mut a, &mut ln1, t_len, d);

            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            linear_forward(&a, params.seg(b.wq), None, &mut q, t_len, d, d);
            linear_forward(&a, params.seg(b.wk), None, &mut k, t_len, d, d);
            linear_forward(&a, params.seg(b.wv), None, &mut v, t_len, d, d);

            let mut ctx = vec![0.0; t_len * d];
            let mut aw_heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let off = h * hd;
                let mut aw = vec![0.0; t_len * t_len];
                for i in 0..t_len {
                    {
                        let qi = &q[i * d + off..i * d + off + hd];
                        let row = &mut aw[i * t_len..i * t_len + i + 1];
                        for (j, rv) in row.iter_mut().enumerate() {
                            let kj = &k[j * d + off..j * d + off + hd];
                            *rv = math::dot(qi, kj) * scale;
                        }
                    }
                    softmax_row(&mut aw[i * t_len..i * t_len + i + 1]);
                    for j in 0..=i {
                        let w = aw[i * t_len + j];
                        let vj = v[j * d + off..j * d + off + hd].to_vec();
                        let ci = &mut ctx[i * d + off..i * d + off + hd];
                        math::axpy(w, &vj, ci);
                    }
                }
                aw_heads.push(aw);
            }

            let mut attn_out = vec![0.0; t_len * d];
            linear_forward(&ctx, params.seg(b.wo), None, &mut attn_out, t_len, d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let mut m = vec![0.0; t_len * d];
            let mut ln2 = NormStats::default();
            layer_norm_forward(&x_mid, params.seg(b.ln2_g), params.seg(b.ln2_b), &mut m, &mut ln2, t_len, d);
            let mut h_pre = vec![0.0; t_len * self.d_ff];
            linear_forward(&m, params.seg(b.w1), Some(params.seg(b.b1)), &mut h_pre, t_len, d, self.d_ff);
            let mut h_act = vec![0.0; t_len * self.d_ff];
            math::gelu_forward(&h_pre, &mut h_act);
            let mut ffn = vec![0.0; t_len * d];
            linear_forward(&h_act, params.seg(b.w2), Some(params.seg(b.b2)), &mut ffn, t_len, self.d_ff, d);
            x = x_mid.iter().zip(&ffn).map(|(a, b)| a + b).collect();

            keys.push(k.clone());
            values.push(v.clone());
            if want_lm {
                layer_caches.push(LayerCache {
                    x_in,
                    ln1,
                    a,
                    q,
                    k,
                    v,
                    aw: aw_heads,
                    ctx,
                    x_mid,
                    ln2,
                    m,
                    h_pre,
                    h_act,
                });
            }
        }

        let mut final_out = vec![0.0; t_len * d];
        let mut lnf = NormStats::default();
        layer_norm_forward(&x, params.seg(self.final_g), params.seg(self.final_b), &mut final_out, &mut lnf, t_len, d);

        let cache = UndCache {
            keys,
            values,
            final_hidden: final_out.clone(),
            len: t_len,
        };
        if !want_lm {
            return Ok((cache, None));
        }
        let mut logits = vec![0.0; t_len * self.vocab];
        linear_forward(&final_out, params.seg(self.lm_head), None, &mut logits, t_len, d, self.vocab);
        let mut probs = logits;
        for i in 0..t_len {
            softmax_row(&mut probs[i * self.vocab..(i + 1) * self.vocab]);
        }
        Ok((
            cache,
            Some(LmCache {
                layers: layer_caches,
                x_last: x,
                lnf,
                final_out,
                probs,
            }),
        ))
    }

    /// Mean next-token cross-entropy over one caption (forward only).
    pub fn lm_loss(&self, params: &Params, tokens: &[u16]) -> Result<f64> {
        let (_, lm) = self.forward(params, tokens, true)?;
        let lm = lm.unwrap();
        let preds = tokens.len() - 1;
        let mut loss = 0.0;
        for i in 0..preds {
            let target = tokens[i + 1] as usize;
            loss -= lm.probs[i * self.vocab + target].max(1e-300).ln();
        }
        Ok(loss / preds as f64)
    }

    /// Forward + backward for one caption; gradient contributions are scaled
    /// by `loss_scale` (1/batch for batch means). Returns the caption loss.
    pub fn lm_loss_and_grads(
        &self,
        params: &Params,
        tw: &TransposedWeights,
        tokens: &[u16],
        loss_scale: f64,
        grads: &mut Grads,
    ) -> Result<f64> {
        let (_, lm) = self.forward(params, tokens, true)?;
        let lm = lm.unwrap();
        let d = self.d;
        let t_len = tokens.len();
        let preds = t_len - 1;
        let n_heads = self.n_heads;
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t_len * self.vocab];
        let norm = loss_scale / preds as f64;
        for i in 0..preds {
            let target = tokens[i + 1] as usize;
            let row = &lm.probs[i * self.vocab..(i + 1) * self.vocab];
            loss -= row[target].max(1e-300).ln();
            let drow = &mut dlogits[i * self.vocab..(i + 1) * self.vocab];
            for (dv, pv) in drow.iter_mut().zip(row) {
                *dv = pv * norm;
            }
            drow[target] -= norm;
        }
        loss /= preds as f64;

        let mut d_final = vec![0.0; t_len * d];
        linear_backward_params(&lm.final_out, &dlogits, grads.seg_mut(self.lm_head), None, t_len, d, self.vocab);
        linear_backward_input(&dlogits, tw.get(self.lm_head), &mut d_final, t_len, d, self.vocab);

        let mut dx = vec![0.0; t_len * d];
        {
            let (dg, db) = grads.seg_pair_mut(self.final_g, self.final_b);
            layer_norm_backward(&d_final, &lm.x_last, params.seg(self.final_g), &lm.lnf, &mut dx, dg, db, t_len, d);
        }

        for (li, b) in self.blocks.iter().enumerate().rev() {
            let lc = &lm.layers[li];
            // FFN branch; dx carries the residual stream gradient throughout.
            let mut d_h_act = vec![0.0; t_len * self.d_ff];
            {
                let (dw, db) = grads.seg_pair_mut(b.w2, b.b2);
                linear_backward_params(&lc.h_act, &dx, dw, Some(db), t_len, self.d_ff, d);
            }
            linear_backward_input(&dx, tw.get(b.w2), &mut d_h_act, t_len, self.d_ff, d);
            let mut d_h_pre = vec![0.0; t_len * self.d_ff];
            math::gelu_backward(&d_h_act, &lc.h_pre, &mut d_h_pre);
            let mut d_m = vec![0.0; t_len * d];
            {
                let (dw, db) = grads.seg_pair_mut(b.w1, b.b1);
                linear_backward_params(&lc.m, &d_h_pre, dw, Some(db), t_len, d, self.d_ff);
            }
            linear_backward_input(&d_h_pre, tw.get(b.w1), &mut d_m, t_len, d, self.d_ff);
            {
                let (dg, db) = grads.seg_pair_mut(b.ln2_g, b.ln2_b);
                layer_norm_backward(&d_m, &lc.x_mid, params.seg(b.ln2_g), &lc.ln2, &mut dx, dg, db, t_len, d);
            }

            // Attention branch.
            let mut d_ctx = vec![0.0; t_len * d];
            linear_backward_params(&lc.ctx, &dx, grads.seg_mut(b.wo), None, t_len, d, d);
            linear_backward_input(&dx, tw.get(b.wo), &mut d_ctx, t_len, d, d);

            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            for h in 0..n_heads {
                let off = h * hd;
                let aw = &lc.aw[h];
                for i in 0..t_len {
                    let d_ctx_i = &d_ctx[i * d + off..i * d + off + hd];
                    let row = &aw[i * t_len..i * t_len + i + 1];
                    let mut d_aw = vec![0.0; i + 1];
                    for (j, dav) in d_aw.iter_mut().enumerate() {
                        let vj = &lc.v[j * d + off..j * d + off + hd];
                        *dav = math::dot(d_ctx_i, vj);
                        let dvj = &mut dv[j * d + off..j * d + off + hd];
                        math::axpy(row[j], d_ctx_i, dvj);
                    }
                    let mut d_logits = vec![0.0; i + 1];
                    softmax_backward_row(row, &d_aw, &mut d_logits);
                    {
                        let dqi = &mut dq[i * d + off..i * d + off + hd];
                        for (j, dl) in d_logits.iter().enumerate() {
                            let kj = &lc.k[j * d + off..j * d + off + hd];
                            math::axpy(dl * scale, kj, dqi);
                        }
                    }
                    let qi = &lc.q[i * d + off..i * d + off + hd];
                    for (j, dl) in d_logits.iter().enumerate() {
                        let dkj = &mut dk[j * d + off..j * d + off + hd];
                        math::axpy(dl * scale, qi, dkj);
                    }
                }
            }

            let mut d_a = vec![0.0; t_len * d];
            linear_backward_params(&lc.a, &dq, grads.seg_mut(b.wq), None, t_len, d, d);
            linear_backward_input(&dq, tw.get(b.wq), &mut d_a, t_len, d, d);
            linear_backward_params(&lc.a, &dk, grads.seg_mut(b.wk), None, t_len, d, d);
            linear_backward_input(&dk, tw.get(b.wk), &mut d_a, t_len, d, d);
            linear_backward_params(&lc.a, &dv, grads.seg_mut(b.wv), None, t_len, d, d);
            linear_backward_input(&dv, tw.get(b.wv), &mut d_a, t_len, d, d);
            {
                let (dg, db) = grads.seg_pair_mut(b.ln1_g, b.ln1_b);
                layer_norm_backward(&d_a, &lc.x_in, params.seg(b.ln1_g), &lc.ln1, &mut dx, dg, db, t_len, d);
            }
        }

        for (i, &tok) in tokens.iter().enumerate() {
            let dxi: Vec<f64> = dx[i * d..(i + 1) * d].to_vec();
            let te = &mut grads.seg_mut(self.tok_emb)[tok as usize * d..(tok as usize + 1) * d];
            math::axpy(1.0, &dxi, te);
            let pe = &mut grads.seg_mut(self.pos_emb)[i * d..(i + 1) * d];
            math::axpy(1.0, &dxi, pe);
        }
        Ok(loss)
    }
}
