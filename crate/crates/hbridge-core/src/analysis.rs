//! Bridge-ablation analyzer.
//!
//! For every aligned layer, rerun the model with that layer's bridge
//! disconnected (understanding K/V removed and the aligner bypassed, so the
//! layer degenerates exactly to a non-bridged one) while holding the
//! evaluation set, noise and timestep draws fixed. Report the normalized MSE
//! of the final latent hidden states against the intact model and the
//! validation flow-matching loss delta.

use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::data::{patchify, Attrs, DatasetRecord};
use crate::error::{HbError, Result};
use crate::flowmatch::{fm_loss, FlowBatch};
use crate::model::{streams, ModelBundle};
use crate::params::Params;
use crate::rng::Rng;
use crate::und::UndCache;

/// Normalized MSE: `sum((a-b)^2) / sum(b^2)` with `b` the intact reference.
pub fn nmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HbError::Input(format!(
            "nmse shape mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let energy: f64 = b.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(HbError::Input(
            "nmse reference has zero energy; ratio undefined".into(),
        ));
    }
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(num / energy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub layer: usize,
    pub bridged: bool,
    pub nmse: f64,
    pub loss_delta: f64,
}

#[derive(Clone, Debug)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    pub samples: usize,
    pub intact_loss: f64,
    pub config: Config,
}

/// Per-layer drift under single-bridge disconnection.
pub fn drift_profile(
    bundle: &ModelBundle,
    params: &Params,
    eval: &[DatasetRecord],
    seed: u64,
) -> Result<DriftReport> {
    if eval.is_empty() {
        return Err(HbError::Input("drift profile needs a non-empty eval set".into()));
    }
    let ctx = bundle.bridge_ctx();
    let bridged_any = !bundle.plan.bridged.is_empty();

    // Fixed draws, shared by the intact run and every ablation.
    let mut rng = Rng::derive(seed, streams::EVAL);
    let batches: Vec<(usize, FlowBatch)> = eval
        .iter()
        .map(|rec| {
            let class = Attrs::from_caption(&rec.tokens)?.index();
            let x1 = patchify(&rec.pattern);
            let t = rng.uniform();
            let mut x0 = vec![0.0; x1.len()];
            rng.fill_normal(&mut x0, 1.0);
            Ok((class, FlowBatch::with_draws(x1, x0, t)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut caches: Vec<Option<UndCache>> = vec![None; crate::data::N_CLASSES];
    if bridged_any {
        for (class, _) in &batches {
            if caches[*class].is_none() {
                let caption = Attrs::from_index(*class).caption();
                caches[*class] = Some(bundle.und.encode(params, &caption)?);
            }
        }
    }
    let cache_of = |class: usize| -> Option<&UndCache> { caches[class].as_ref() };

    // Intact reference, computed once.
    let mut intact_hidden = Vec::with_capacity(batches.len());
    let mut intact_loss = 0.0;
    for (class, fb) in &batches {
        let (out, _) = bundle.gen.forward(
            params,
            &ctx,
            cache_of(*class),
            &bundle.srt,
            &fb.x_t,
            fb.t,
            None,
            false,
        )?;
        intact_loss += fm_loss(&out.velocity, &fb.v_target);
        intact_hidden.push(out.final_latent);
    }
    intact_loss /= batches.len() as f64;

    let mut rows = Vec::with_capacity(bundle.plan.aligned_count);
    for layer in 0..bundle.plan.aligned_count {
        let mut nmse_sum = 0.0;
        let mut loss_sum = 0.0;
        for (i, (class, fb)) in batches.iter().enumerate() {
            let (out, _) = bundle.gen.forward(
                params,
                &ctx,
                cache_of(*class),
                &bundle.srt,
                &fb.x_t,
                fb.t,
                Some(layer),
                false,
            )?;
            nmse_sum += nmse(&out.final_latent, &intact_hidden[i])?;
            loss_sum += fm_loss(&out.velocity, &fb.v_target);
        }
        rows.push(DriftRow {
            layer,
            bridged: bundle.plan.is_bridged_gen_layer(layer),
            nmse: nmse_sum / batches.len() as f64,
            loss_delta: loss_sum / batches.len() as f64 - intact_loss,
        });
    }

    Ok(DriftReport {
        rows,
        samples: batches.len(),
        intact_loss,
        config: bundle.cfg.clone(),
    })
}

pub fn report_csv(report: &DriftReport) -> String {
    let mut out = String::from("layer,bridged,nmse,loss_delta\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.bridged, r.nmse, r.loss_delta));
    }
    out
}

/// Self-contained line chart of both series against layer index.
pub fn report_svg(report: &DriftReport) -> String {
    let (w, h) = (800.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let n = report.rows.len();

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for r in &report.rows {
        lo = lo.min(r.nmse).min(r.loss_delta);
        hi = hi.max(r.nmse).max(r.loss_delta);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let x_of = |i: usize| ml + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y_of = |v: f64| mt + plot_h * (1.0 - (v - lo) / (hi - lo));
    let path = |get: &dyn Fn(&DriftRow) -> f64| -> String {
        report
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.2},{:.2}", x_of(i), y_of(get(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">bridge ablation: per-layer drift ({} samples)</text>\n",
        ml, report.samples
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    // Zero line when visible.
    if lo < 0.0 && hi > 0.0 {
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"#cccccc\" stroke-dasharray=\"4 3\"/>\n",
            y_of(0.0),
            ml + plot_w
        ));
    }
    for (i, r) in report.rows.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}{}</text>\n",
            x_of(i),
            mt + plot_h + 18.0,
            r.layer,
            if r.bridged { "*" } else { "" }
        ));
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            ml - 6.0,
            y_of(v) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
        path(&|r| r.nmse)
    ));
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"2\" points=\"{}\"/>\n",
        path(&|r| r.loss_delta)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" fill=\"#1f77b4\">nmse</text>\n",
        ml + plot_w - 120.0,
        mt + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" fill=\"#ff7f0e\">loss_delta</text>\n",
        ml + plot_w - 120.0,
        mt + 32.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">layer (* = bridged)</text>\n",
        ml,
        h - 14.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Write `<prefix>.csv` and `<prefix>.svg`; refuses empty reports before
/// creating any file.
pub fn emit_report(report: &DriftReport, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.rows.is_empty() || report.samples == 0 {
        return Err(HbError::Input("refusing to emit an empty drift report".into()));
    }
    let csv_path = prefix.with_extension("csv");
    let svg_path = prefix.with_extension("svg");
    std::fs::write(&csv_path, report_csv(report))?;
    std::fs::write(&svg_path, report_svg(report))?;
    Ok((csv_path, svg_path))
}
