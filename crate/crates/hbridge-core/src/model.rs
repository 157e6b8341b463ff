//! Assembly of the full parameter bundle: both experts, the per-layer
//! aligners, the SRT bank and the frozen target encoder, all in one flat
//! parameter bank with a resolved bridge plan.

use crate::bridge::AlignerRefs;
use crate::config::{resolve_bridge_plan, BridgePlan, Config};
use crate::error::Result;
use crate::gen::{BridgeCtx, GenRefs};
use crate::params::{LayoutBuilder, Params, SegId};
use crate::rng::Rng;
use crate::srt::{SrtRefs, VitRefs};
use crate::und::UndRefs;

/// Which parameter groups train in the current run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Language-model pretraining of the understanding expert.
    PretrainUnderstanding,
    /// Unconditional flow-matching pretraining of the generative expert
    /// (and SRT bank); the bridge stays untouched.
    PretrainGenerative,
    /// Bridged training: generative expert, aligners and SRT bank train
    /// against the frozen understanding expert.
    BridgeTrain,
}

pub struct ModelBundle {
    pub cfg: Config,
    pub plan: BridgePlan,
    pub und: UndRefs,
    pub vit: VitRefs,
    pub gen: GenRefs,
    pub aligners: Vec<AlignerRefs>,
    pub srt: SrtRefs,
}

/// Stream tags for deriving independent generators from one run seed.
/// Each parameter group initializes from its own stream so models that
/// share expert shapes get identical expert weights even when the bridge
/// topology (and with it the aligner count) differs.
pub mod streams {
    pub const INIT_UND: u64 = 1;
    pub const INIT_GEN: u64 = 2;
    pub const INIT_ALIGN: u64 = 3;
    pub const INIT_SRT: u64 = 4;
    pub const BATCH: u64 = 16;
    pub const FLOW: u64 = 17;
    pub const EVAL: u64 = 18;
}

impl ModelBundle {
    /// Build the layout and initialize parameters from the config's seed.
    /// The frozen target encoder initializes from its own fixed seed.
    pub fn new(cfg: &Config) -> Result<(ModelBundle, Params)> {
        cfg.validate()?;
        let plan = resolve_bridge_plan(&cfg.understanding, &cfg.generative, &cfg.bridge)?;

        let mut lb = LayoutBuilder::new();
        let und = UndRefs::build(&mut lb, &cfg.understanding);
        let vit = VitRefs::build(&mut lb, cfg.vit.d_feat, cfg.vit.n_heads);
        let gen = GenRefs::build(&mut lb, &cfg.generative, &plan, cfg.train.n_srt_tokens);
        let aligners: Vec<AlignerRefs> = plan
            .bridged
            .iter()
            .map(|&(_, g)| {
                AlignerRefs::build(&mut lb, g, cfg.generative.d_model, cfg.understanding.d_model)
            })
            .collect();
        let srt = SrtRefs::build(
            &mut lb,
            cfg.train.n_srt_tokens,
            cfg.generative.d_model,
            cfg.vit.d_feat,
        );

        let mut params = Params::zeros(lb.finish());
        let seed = cfg.train.seed;
        und.init(&mut params, &mut Rng::derive(seed, streams::INIT_UND));
        vit.init(&mut params);
        gen.init(&mut params, &mut Rng::derive(seed, streams::INIT_GEN));
        let mut align_rng = Rng::derive(seed, streams::INIT_ALIGN);
        for a in &aligners {
            a.init(&mut params, &mut align_rng);
        }
        srt.init(&mut params, &mut Rng::derive(seed, streams::INIT_SRT));

        let bundle = ModelBundle {
            cfg: cfg.clone(),
            plan,
            und,
            vit,
            gen,
            aligners,
            srt,
        };
        bundle.apply_phase(&mut params, Phase::BridgeTrain);
        Ok((bundle, params))
    }

    pub fn bridge_ctx(&self) -> BridgeCtx<'_> {
        BridgeCtx {
            plan: &self.plan,
            aligners: &self.aligners,
            n_heads_und: self.und.n_heads,
            d_und: self.und.d,
        }
    }

    /// Set frozen flags for the given phase. The target encoder never trains.
    pub fn apply_phase(&self, params: &mut Params, phase: Phase) {
        let set = |params: &mut Params, segs: &[SegId], frozen: bool| {
            for id in segs {
                params.set_frozen(*id, frozen);
            }
        };
        let aligner_segs: Vec<SegId> = self
            .aligners
            .iter()
            .flat_map(|a| a.all_segs.clone())
            .collect();
        match phase {
            Phase::PretrainUnderstanding => {
                set(params, &self.und.all_segs, false);
                set(params, &self.gen.all_segs, true);
                set(params, &aligner_segs, true);
                set(params, &self.srt.all_segs, true);
            }
            Phase::PretrainGenerative => {
                set(params, &self.und.all_segs, true);
                set(params, &self.gen.all_segs, false);
                set(params, &aligner_segs, true);
                set(params, &self.srt.all_segs, false);
            }
            Phase::BridgeTrain => {
                set(params, &self.und.all_segs, true);
                set(params, &self.gen.all_segs, false);
                set(params, &aligner_segs, false);
                set(params, &self.srt.all_segs, false);
            }
        }
        set(params, &self.vit.all_segs, true);
    }

    /// Role label for reporting, derived from the tensor name.
    pub fn role_of(name: &str) -> &'static str {
        if name.starts_with("bridge.") {
            "aligner"
        } else if name.starts_with("srt.") {
            "srt_bank"
        } else if name.starts_with("gen.block") {
            "gen_block"
        } else if name.starts_with("gen.vel_head") {
            "head"
        } else if name.starts_with("gen.") {
            "gen_embed"
        } else if name.starts_with("und.") {
            "understanding"
        } else {
            "vit"
        }
    }
}
