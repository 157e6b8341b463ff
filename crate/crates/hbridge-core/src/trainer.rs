//! Training loops, the optimizer, and the gradient-fidelity checker.
//!
//! One `step()` processes one micro-batch; the optimizer applies after
//! `grad_accum` micro-batches with gradients scaled by `1/grad_accum`.
//! Batches are drawn procedurally from the 128-class attribute world, so a
//! run is fully determined by its seed. The understanding expert is frozen
//! outside its own pretraining phase, which also lets the trainer encode all
//! 128 captions once up front instead of per sample.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::BridgePlan;
use crate::data::{patchify, reference_renders, Attrs, N_CLASSES};
use crate::error::{HbError, Result};
use crate::flowmatch::{fm_loss, fm_loss_backward, make_flow_batch, FlowBatch};
use crate::gen::BridgeCtx;
use crate::math;
use crate::model::{streams, ModelBundle, Phase};
use crate::params::{Grads, Params, SegId, TransposedWeights};
use crate::parallel::ThreadRunner;
use crate::rng::Rng;
use crate::srt::extract_target_features;
use crate::und::UndCache;

/// Decoupled-weight-decay adaptive-moment optimizer. Moment state exists
/// only for trainable tensors; touching a frozen tensor is a fatal internal
/// error rather than a silent update.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64) -> AdamW {
        let moments = params
            .layout
            .iter()
            .map(|(id, def)| (!params.is_frozen(id)).then(|| (vec![0.0; def.len()], vec![0.0; def.len()])))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step_count: 0,
            moments,
        }
    }

    pub fn has_state_for(&self, id: SegId) -> bool {
        self.moments[id.0].is_some()
    }

    pub fn moment_slices(&self, id: SegId) -> Option<(&[f64], &[f64])> {
        self.moments[id.0].as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: SegId, m: Vec<f64>, v: Vec<f64>) {
        self.moments[id.0] = Some((m, v));
    }

    pub fn apply(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (id, def) in params.layout.clone().iter() {
            let Some((m, v)) = self.moments[id.0].as_mut() else {
                continue;
            };
            if params.is_frozen(id) {
                return Err(HbError::Internal(format!(
                    "attempted update of frozen tensor {}",
                    def.name
                )));
            }
            let g = grads.seg(id);
            let p = params.seg_mut(id);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the metrics log. Wall time is the only field allowed to
/// differ between identically seeded runs.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub srt_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_loss: Option<f64>,
    pub total: f64,
    pub wall_ms: u64,
}

struct SampleTask {
    class: usize,
    fb: FlowBatch,
}

struct ChunkCtx {
    grads: Grads,
    // (fm, srt) or (lm, None) per sample, in batch order within the chunk.
    losses: Vec<(f64, Option<f64>)>,
    error: Option<HbError>,
}

pub struct Trainer<'a> {
    pub bundle: &'a ModelBundle,
    pub params: Params,
    pub opt: AdamW,
    phase: Phase,
    effective_plan: BridgePlan,
    batch_rng: Rng,
    flow_rng: Rng,
    runner: ThreadRunner,
    latents: Vec<Vec<f64>>,
    srt_targets: Vec<Vec<f64>>,
    und_caches: Vec<UndCache>,
    accum: Grads,
    accum_count: usize,
    chunk_ctxs: Vec<ChunkCtx>,
    pub micro_step: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a ModelBundle, mut params: Params, phase: Phase, threads: usize) -> Result<Trainer<'a>> {
        bundle.apply_phase(&mut params, phase);
        let cfg = &bundle.cfg;
        let opt = AdamW::new(&params, cfg.train.learning_rate);

        // Unconditional phases run a bridge-free plan over the same blocks.
        let effective_plan = match phase {
            Phase::PretrainGenerative => BridgePlan {
                projector_depth: bundle.plan.projector_depth,
                aligned_count: bundle.plan.aligned_count,
                bridged: Vec::new(),
            },
            _ => bundle.plan.clone(),
        };

        let renders = reference_renders();
        let latents: Vec<Vec<f64>> = renders.iter().map(|p| patchify(p)).collect();
        let srt_targets = if cfg.train.srt_enabled && phase != Phase::PretrainUnderstanding {
            renders
                .iter()
                .map(|p| extract_target_features(&params, &bundle.vit, p, cfg.train.n_srt_tokens))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        // All captions the world contains, encoded once; valid while the
        // understanding expert is frozen.
        let und_caches = if phase == Phase::BridgeTrain && !effective_plan.bridged.is_empty() {
            (0..N_CLASSES)
                .map(|i| bundle.und.encode(&params, &Attrs::from_index(i).caption()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let runner = ThreadRunner::new(threads);
        let layout = params.layout.clone();
        let n_chunks = runner.threads();
        let chunk_ctxs = (0..n_chunks)
            .map(|_| ChunkCtx {
                grads: Grads::zeros(layout.clone()),
                losses: Vec::new(),
                error: None,
            })
            .collect();

        Ok(Trainer {
            bundle,
            params,
            opt,
            phase,
            effective_plan,
            batch_rng: Rng::derive(cfg.train.seed, streams::BATCH),
            flow_rng: Rng::derive(cfg.train.seed, streams::FLOW),
            runner,
            latents,
            srt_targets,
            und_caches,
            accum: Grads::zeros(layout),
            accum_count: 0,
            chunk_ctxs,
            micro_step: 0,
            started: Instant::now(),
        })
    }

    pub fn rng_states(&self) -> ([u64; 4], [u64; 4]) {
        (self.batch_rng.state(), self.flow_rng.state())
    }

    /// Gradients accumulated since the last optimizer application. With
    /// `grad_accum` larger than the steps taken, this is the cumulative
    /// (per-micro-batch mean) gradient of the whole run so far.
    pub fn pending_grads(&self) -> &Grads {
        &self.accum
    }

    pub fn restore_rng(&mut self, batch: [u64; 4], flow: [u64; 4]) {
        self.batch_rng = Rng::from_state(batch);
        self.flow_rng = Rng::from_state(flow);
    }

    /// One micro-batch of forward/backward; applies the optimizer every
    /// `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<StepMetrics> {
        self.micro_step += 1;
        let step = self.micro_step;
        let cfg = &self.bundle.cfg;
        let batch = cfg.train.batch_size;

        // Draws are sequential so the random streams never depend on thread
        // scheduling.
        let classes: Vec<usize> = (0..batch)
            .map(|_| Attrs::uniform(&mut self.batch_rng).index())
            .collect();

        let (fm_mean, srt_mean, lm_mean) = if self.phase == Phase::PretrainUnderstanding {
            let lm = self.lm_micro_batch(&classes, step)?;
            (None, None, Some(lm))
        } else {
            let tasks: Vec<SampleTask> = classes
                .iter()
                .map(|&class| SampleTask {
                    class,
                    fb: make_flow_batch(self.latents[class].clone(), &mut self.flow_rng),
                })
                .collect();
            let (fm, srt) = self.flow_micro_batch(&tasks, step)?;
            (Some(fm), srt, None)
        };

        self.accum_count += 1;
        if self.accum_count >= cfg.train.grad_accum {
            self.accum.scale(1.0 / cfg.train.grad_accum as f64);
            if !math::all_finite(&self.accum.data) {
                return Err(HbError::Divergence {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            self.opt.apply(&mut self.params, &self.accum)?;
            self.accum.clear();
            self.accum_count = 0;
        }

        let total = fm_mean.unwrap_or(0.0) + srt_mean.unwrap_or(0.0) + lm_mean.unwrap_or(0.0);
        if !total.is_finite() {
            return Err(HbError::Divergence {
                step,
                detail: format!("non-finite loss {total}"),
            });
        }
        Ok(StepMetrics {
            step,
            fm_loss: fm_mean,
            srt_loss: srt_mean,
            lm_loss: lm_mean,
            total,
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    fn flow_micro_batch(&mut self, tasks: &[SampleTask], step: u64) -> Result<(f64, Option<f64>)> {
        let bundle = self.bundle;
        let srt_enabled = bundle.cfg.train.srt_enabled;
        let loss_scale = 1.0 / tasks.len() as f64;
        let tw = TransposedWeights::build(&self.params);
        let bounds = self.runner.chunk_bounds(tasks.len());
        let n_chunks = bounds.len();
        let ctx = BridgeCtx {
            plan: &self.effective_plan,
            aligners: &bundle.aligners,
            n_heads_und: bundle.und.n_heads,
            d_und: bundle.und.d,
        };
        let params = &self.params;
        let und_caches = &self.und_caches;
        let srt_targets = &self.srt_targets;
        let bridged = !self.effective_plan.bridged.is_empty();

        for c in self.chunk_ctxs.iter_mut() {
            c.grads.clear();
            c.losses.clear();
            c.error = None;
        }

        {
            let chunks = &mut self.chunk_ctxs[..n_chunks];
            self.runner.run(chunks, |ci, chunk| {
                let (lo, hi) = bounds[ci];
                for task in &tasks[lo..hi] {
                    let cache = bridged.then(|| &und_caches[task.class]);
                    let mut run = || -> Result<(f64, Option<f64>)> {
                        let (out, fwd) = bundle.gen.forward(
                            params,
                            &ctx,
                            cache,
                            &bundle.srt,
                            &task.fb.x_t,
                            task.fb.t,
                            None,
                            true,
                        )?;
                        let fwd = fwd.expect("cache requested");
                        let fm = fm_loss(&out.velocity, &task.fb.v_target);
                        let mut d_vel = vec![0.0; out.velocity.len()];
                        fm_loss_backward(&out.velocity, &task.fb.v_target, loss_scale, &mut d_vel);
                        let mut d_srt = vec![0.0; out.srt_out.len()];
                        let srt_val = if srt_enabled {
                            Some(bundle.srt.loss_and_grads(
                                params,
                                &tw,
                                &out.srt_out,
                                &srt_targets[task.class],
                                loss_scale,
                                &mut d_srt,
                                &mut chunk.grads,
                            )?)
                        } else {
                            None
                        };
                        bundle.gen.backward(
                            params,
                            &tw,
                            &ctx,
                            cache,
                            &bundle.srt,
                            &task.fb.x_t,
                            &fwd,
                            &d_vel,
                            &d_srt,
                            &mut chunk.grads,
                        )?;
                        Ok((fm, srt_val))
                    };
                    match run() {
                        Ok(losses) => chunk.losses.push(losses),
                        Err(e) => {
                            chunk.error = Some(e);
                            return;
                        }
                    }
                }
            });
        }

        let mut fm_sum = 0.0;
        let mut srt_sum = 0.0;
        for chunk in self.chunk_ctxs[..n_chunks].iter_mut() {
            if let Some(e) = chunk.error.take() {
                return Err(match e {
                    HbError::Divergence { detail, .. } => HbError::Divergence { step, detail },
                    other => other,
                });
            }
            self.accum.accumulate(&chunk.grads);
            for (fm, srt) in &chunk.losses {
                fm_sum += fm;
                srt_sum += srt.unwrap_or(0.0);
            }
        }
        let fm_mean = fm_sum / tasks.len() as f64;
        let srt_mean = srt_enabled.then(|| srt_sum / tasks.len() as f64);
        Ok((fm_mean, srt_mean))
    }

    fn lm_micro_batch(&mut self, classes: &[usize], step: u64) -> Result<f64> {
        let bundle = self.bundle;
        let loss_scale = 1.0 / classes.len() as f64;
        let tw = TransposedWeights::build(&self.params);
        let bounds = self.runner.chunk_bounds(classes.len());
        let n_chunks = bounds.len();
        let params = &self.params;

        for c in self.chunk_ctxs.iter_mut() {
            c.grads.clear();
            c.losses.clear();
            c.error = None;
        }
        {
            let chunks = &mut self.chunk_ctxs[..n_chunks];
            self.runner.run(chunks, |ci, chunk| {
                let (lo, hi) = bounds[ci];
                for &class in &classes[lo..hi] {
                    let caption = Attrs::from_index(class).caption();
                    match bundle
                        .und
                        .lm_loss_and_grads(params, &tw, &caption, loss_scale, &mut chunk.grads)
                    {
                        Ok(l) => chunk.losses.push((l, None)),
                        Err(e) => {
                            chunk.error = Some(e);
                            return;
                        }
                    }
                }
            });
        }

        let mut sum = 0.0;
        for chunk in self.chunk_ctxs[..n_chunks].iter_mut() {
            if let Some(e) = chunk.error.take() {
                return Err(match e {
                    HbError::Divergence { detail, .. } => HbError::Divergence { step, detail },
                    other => other,
                });
            }
            self.accum.accumulate(&chunk.grads);
            for (l, _) in &chunk.losses {
                sum += l;
            }
        }
        Ok(sum / classes.len() as f64)
    }

    /// Run a schedule, streaming one JSON object per line into `sink`.
    pub fn run_steps(&mut self, steps: u64, mut sink: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.step()?;
            if let Some(s) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *s, &m)
                    .map_err(|e| HbError::Format(format!("metrics write: {e}")))?;
                s.write_all(b"\n")?;
            }
            history.push(m);
        }
        Ok(history)
    }
}

/// Central-difference derivative of a scalar closure.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[derive(Clone, Debug)]
pub struct RoleReport {
    pub role: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub roles: Vec<RoleReport>,
    pub max_rel_err: f64,
    pub total_coords: usize,
    pub skipped_frozen: usize,
}

pub struct GradCheckOptions {
    pub coords_per_role: usize,
    pub eps: f64,
    pub seed: u64,
    /// Role filter; `None` checks every trainable role.
    pub roles: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords_per_role: 16,
            eps: 1e-5,
            seed: 17,
            roles: None,
        }
    }
}

/// Compare analytic gradients of the total training loss against central
/// finite differences on a fixed two-sample micro-batch, sampling
/// coordinates from every requested tensor role. Frozen tensors are skipped
/// and counted, never differentiated.
pub fn finite_diff_check(
    bundle: &ModelBundle,
    params: &Params,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let cfg = &bundle.cfg;
    let mut draw_rng = Rng::derive(opts.seed, 0xfd);
    let classes = [
        draw_rng.below(N_CLASSES),
        draw_rng.below(N_CLASSES),
    ];
    let tasks: Vec<(usize, FlowBatch, UndCache, Vec<f64>)> = classes
        .iter()
        .map(|&class| {
            let pattern = crate::data::render(Attrs::from_index(class));
            let fb = make_flow_batch(patchify(&pattern), &mut draw_rng);
            let cache = bundle.und.encode(params, &Attrs::from_index(class).caption())?;
            let target = extract_target_features(params, &bundle.vit, &pattern, cfg.train.n_srt_tokens)?;
            Ok((class, fb, cache, target))
        })
        .collect::<Result<Vec<_>>>()?;

    let bridged = !bundle.plan.bridged.is_empty();
    let loss_of = |p: &Params| -> Result<f64> {
        let ctx = bundle.bridge_ctx();
        let mut total = 0.0;
        for (_, fb, cache, target) in &tasks {
            let (out, _) = bundle.gen.forward(
                p,
                &ctx,
                bridged.then_some(cache),
                &bundle.srt,
                &fb.x_t,
                fb.t,
                None,
                false,
            )?;
            total += fm_loss(&out.velocity, &fb.v_target);
            if cfg.train.srt_enabled {
                total += bundle.srt.loss(p, &out.srt_out, target)?;
            }
        }
        Ok(total / tasks.len() as f64)
    };

    // Analytic gradients once.
    let tw = TransposedWeights::build(params);
    let mut grads = Grads::zeros(params.layout.clone());
    let scale = 1.0 / tasks.len() as f64;
    {
        let ctx = bundle.bridge_ctx();
        for (_, fb, cache, target) in &tasks {
            let (out, fwd) = bundle.gen.forward(
                params,
                &ctx,
                bridged.then_some(cache),
                &bundle.srt,
                &fb.x_t,
                fb.t,
                None,
                true,
            )?;
            let fwd = fwd.expect("cache requested");
            let mut d_vel = vec![0.0; out.velocity.len()];
            fm_loss_backward(&out.velocity, &fb.v_target, scale, &mut d_vel);
            let mut d_srt = vec![0.0; out.srt_out.len()];
            if cfg.train.srt_enabled {
                bundle.srt.loss_and_grads(
                    params,
                    &tw,
                    &out.srt_out,
                    target,
                    scale,
                    &mut d_srt,
                    &mut grads,
                )?;
            }
            bundle.gen.backward(
                params,
                &tw,
                &ctx,
                bridged.then_some(cache),
                &bundle.srt,
                &fb.x_t,
                &fwd,
                &d_vel,
                &d_srt,
                &mut grads,
            )?;
        }
    }

    // Group trainable segments by role.
    let mut by_role: std::collections::BTreeMap<String, Vec<SegId>> = Default::default();
    let mut skipped_frozen = 0usize;
    let wanted = |role: &str| {
        opts.roles
            .as_ref()
            .map(|rs| rs.iter().any(|r| r == role))
            .unwrap_or(true)
    };
    for (id, def) in params.layout.iter() {
        let role = ModelBundle::role_of(&def.name);
        if !wanted(role) {
            continue;
        }
        if params.is_frozen(id) {
            skipped_frozen += 1;
            continue;
        }
        by_role.entry(role.to_string()).or_default().push(id);
    }

    let mut probe = params.clone();
    let mut pick_rng = Rng::derive(opts.seed, 0xc0);
    let mut roles = Vec::new();
    let mut overall: f64 = 0.0;
    let mut total_coords = 0usize;
    for (role, segs) in &by_role {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.coords_per_role {
            let seg = segs[pick_rng.below(segs.len())];
            let idx = pick_rng.below(params.layout.seg(seg).len());
            let analytic = grads.seg(seg)[idx];
            let orig = probe.seg(seg)[idx];
            probe.seg_mut(seg)[idx] = orig + opts.eps;
            let lp = loss_of(&probe)?;
            probe.seg_mut(seg)[idx] = orig - opts.eps;
            let lm = loss_of(&probe)?;
            probe.seg_mut(seg)[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            total_coords += 1;
        }
        overall = overall.max(worst);
        roles.push(RoleReport {
            role: role.clone(),
            coords: opts.coords_per_role,
            max_rel_err: worst,
        });
    }

    Ok(GradCheckReport {
        roles,
        max_rel_err: overall,
        total_coords,
        skipped_frozen,
    })
}

/// Mean validation flow-matching loss over fixed records and fixed draws.
/// Used by the ablation analyzer, which must hold everything but the
/// disconnected layer constant.
pub fn validation_fm_loss(
    bundle: &ModelBundle,
    params: &Params,
    batches: &[(usize, FlowBatch)],
    caches: &[UndCache],
    disconnect: Option<usize>,
) -> Result<f64> {
    let ctx = bundle.bridge_ctx();
    let bridged = !bundle.plan.bridged.is_empty();
    let mut total = 0.0;
    for (class, fb) in batches {
        let (out, _) = bundle.gen.forward(
            params,
            &ctx,
            bridged.then(|| &caches[*class]),
            &bundle.srt,
            &fb.x_t,
            fb.t,
            disconnect,
            false,
        )?;
        total += fm_loss(&out.velocity, &fb.v_target);
    }
    Ok(total / batches.len() as f64)
}
