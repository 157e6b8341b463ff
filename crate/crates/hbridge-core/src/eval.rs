//! Sampling from a trained model and the attribute-decoding evaluator.

use crate::data::{
    decode_attributes, patchify, reference_renders, unpatchify, Attrs, N_LATENT_TOKENS, PATCH_DIM,
};
use crate::error::Result;
use crate::flowmatch::euler_sample;
use crate::model::{streams, ModelBundle};
use crate::params::Params;
use crate::parallel::ThreadRunner;
use crate::rng::Rng;

/// Generate one pattern for a caption by integrating the learned velocity
/// field from noise. Deterministic given the rng state.
pub fn sample_pattern(
    bundle: &ModelBundle,
    params: &Params,
    attrs: Attrs,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let ctx = bundle.bridge_ctx();
    let cache = if bundle.plan.bridged.is_empty() {
        None
    } else {
        Some(bundle.und.encode(params, &attrs.caption())?)
    };
    let latents = euler_sample(
        |x, t| {
            let (out, _) = bundle.gen.forward(
                params,
                &ctx,
                cache.as_ref(),
                &bundle.srt,
                x,
                t,
                None,
                false,
            )?;
            Ok(out.velocity)
        },
        N_LATENT_TOKENS * PATCH_DIM,
        steps,
        rng,
    )?;
    Ok(unpatchify(&latents))
}

#[derive(Clone, Debug)]
pub struct DecodeEval {
    pub accuracy: f64,
    pub hits: usize,
    pub trials: usize,
}

/// Sample `trials` random captions, generate, decode by nearest reference
/// render, and score exact attribute-tuple matches. Per-trial rng streams
/// keep the result independent of worker count.
pub fn decode_accuracy(
    bundle: &ModelBundle,
    params: &Params,
    trials: usize,
    steps: usize,
    seed: u64,
    threads: usize,
) -> Result<DecodeEval> {
    let renders = reference_renders();
    let mut caption_rng = Rng::derive(seed, streams::EVAL);
    let wanted: Vec<Attrs> = (0..trials).map(|_| Attrs::uniform(&mut caption_rng)).collect();

    let runner = ThreadRunner::new(threads);
    let mut results: Vec<std::result::Result<bool, crate::error::HbError>> =
        (0..trials).map(|_| Ok(false)).collect();
    {
        let wanted = &wanted;
        let renders = &renders;
        runner.run(&mut results, |i, slot| {
            let mut rng = Rng::derive(seed ^ 0x5a5a, streams::EVAL + 1 + i as u64);
            *slot = sample_pattern(bundle, params, wanted[i], steps, &mut rng)
                .map(|pattern| decode_attributes(&pattern, renders) == wanted[i]);
        });
    }
    let mut hits = 0;
    for r in results {
        if r? {
            hits += 1;
        }
    }
    Ok(DecodeEval {
        accuracy: hits as f64 / trials as f64,
        hits,
        trials,
    })
}

/// Round-trip sanity for the evaluator itself: patchify/unpatchify the clean
/// render and decode it back. Used as a self-check oracle in tests.
pub fn decode_round_trip(attrs: Attrs) -> Attrs {
    let renders = reference_renders();
    let pattern = unpatchify(&patchify(&renders[attrs.index()]));
    decode_attributes(&pattern, &renders)
}
