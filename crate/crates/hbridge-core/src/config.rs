//! Run configuration: expert shapes, bridge topology, training schedule.
//!
//! Configs load from a single JSON document per run. Unknown keys are a hard
//! error so typos in sweep scripts fail loudly instead of silently training
//! the wrong model. Scalar fields may be overridden from the command line;
//! the merged result is what gets hashed into manifests and checkpoints.

use serde::{Deserialize, Serialize};

use crate::data::{CAPTION_LEN, N_LATENT_TOKENS, VOCAB_SIZE};
use crate::error::{HbError, Result};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Understanding expert only; the generative expert has no vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub max_seq: usize,
}

impl ExpertSpec {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate_common(&self, who: &str) -> Result<()> {
        let err = |m: String| Err(HbError::Config(m));
        if self.n_layers == 0 {
            return err(format!("{who}: n_layers must be >= 1"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return err(format!("{who}: all dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "{who}: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Deep,
    Shallow,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::Deep
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    pub skip_front: usize,
    pub skip_back: usize,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    /// Explicit opt-in for a bridge-free model; requires
    /// skip_front + skip_back to cover every aligned layer.
    #[serde(default)]
    pub decoupled: bool,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_grad_accum() -> usize {
    1
}
fn default_srt_enabled() -> bool {
    true
}
fn default_n_srt() -> usize {
    16
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_grad_accum")]
    pub grad_accum: usize,
    pub seed: u64,
    #[serde(default = "default_srt_enabled")]
    pub srt_enabled: bool,
    #[serde(default = "default_n_srt")]
    pub n_srt_tokens: usize,
}

fn default_d_feat() -> usize {
    32
}
fn default_vit_heads() -> usize {
    4
}

/// Shape of the frozen target-feature encoder used by the SRT loss.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    #[serde(default = "default_d_feat")]
    pub d_feat: usize,
    #[serde(default = "default_vit_heads")]
    pub n_heads: usize,
}

impl Default for VitSpec {
    fn default() -> Self {
        VitSpec {
            d_feat: default_d_feat(),
            n_heads: default_vit_heads(),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub understanding: ExpertSpec,
    pub generative: ExpertSpec,
    pub bridge: BridgeSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub vit: VitSpec,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HbError::Config(m));
        self.understanding.validate_common("understanding")?;
        self.generative.validate_common("generative")?;

        match self.understanding.vocab_size {
            None => return err("understanding.vocab_size is required".into()),
            Some(v) if v < VOCAB_SIZE => {
                return err(format!(
                    "understanding.vocab_size {v} below caption vocabulary {VOCAB_SIZE}"
                ))
            }
            _ => {}
        }
        if self.generative.vocab_size.is_some() {
            return err("generative.vocab_size must be absent".into());
        }
        if self.understanding.max_seq < CAPTION_LEN {
            return err(format!(
                "understanding.max_seq {} below caption length {CAPTION_LEN}",
                self.understanding.max_seq
            ));
        }
        if self.generative.d_model % 2 != 0 {
            return err("generative.d_model must be even (sinusoidal time features)".into());
        }

        if self.train.learning_rate <= 0.0 {
            return err("train.learning_rate must be > 0".into());
        }
        // steps = 0 is legal: pretraining for zero steps must leave weights
        // untouched, so the schedule may be empty.
        if self.train.batch_size == 0 || self.train.grad_accum == 0 {
            return err("train.batch_size and train.grad_accum must be >= 1".into());
        }
        if self.train.n_srt_tokens == 0 || self.train.n_srt_tokens > self.generative.max_seq {
            return err(format!(
                "train.n_srt_tokens {} outside 1..={}",
                self.train.n_srt_tokens, self.generative.max_seq
            ));
        }
        if self.train.n_srt_tokens > N_LATENT_TOKENS {
            return err(format!(
                "train.n_srt_tokens {} exceeds patch-token count {N_LATENT_TOKENS}",
                self.train.n_srt_tokens
            ));
        }

        let gen_seq = N_LATENT_TOKENS + self.train.n_srt_tokens;
        if self.generative.max_seq != gen_seq {
            return err(format!(
                "generative.max_seq must equal n_latent + n_srt = {gen_seq}, got {}",
                self.generative.max_seq
            ));
        }

        if self.vit.d_feat == 0 || self.vit.d_feat % self.vit.n_heads != 0 {
            return err(format!(
                "vit.d_feat {} not divisible by vit.n_heads {}",
                self.vit.d_feat, self.vit.n_heads
            ));
        }

        // The plan resolver re-checks bridge invariants in context.
        resolve_bridge_plan(&self.understanding, &self.generative, &self.bridge)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| HbError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_json(&text)
    }

    /// Override one scalar field addressed as `section.field`, e.g.
    /// `bridge.skip_front=2` or `train.seed=9`. Values parse as JSON scalars.
    /// Only structure is checked here; callers re-validate once the whole
    /// override batch is applied, so mutually dependent fields can change
    /// together.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| HbError::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc = serde_json::to_value(&*self)
            .map_err(|e| HbError::Internal(format!("config serialize: {e}")))?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .map_err(|e| HbError::Config(format!("override value `{value}`: {e}")))?;
        if parsed.is_object() || parsed.is_array() {
            return Err(HbError::Config(format!(
                "override `{path}` must be a scalar"
            )));
        }
        let mut cursor = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = cursor
                .as_object_mut()
                .ok_or_else(|| HbError::Config(format!("override path `{path}` invalid")))?;
            if i + 1 == parts.len() {
                if !map.contains_key(*part) {
                    return Err(HbError::Config(format!(
                        "override path `{path}`: unknown field `{part}`"
                    )));
                }
                map.insert(part.to_string(), parsed);
                break;
            }
            cursor = map
                .get_mut(*part)
                .ok_or_else(|| HbError::Config(format!("override path `{path}`: unknown field `{part}`")))?;
        }
        let updated: Config = serde_json::from_value(doc)
            .map_err(|e| HbError::Config(format!("override `{assignment}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Stable 64-bit hash of the resolved config (FNV-1a over canonical JSON).
    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Fields that determine tensor shapes; two configs must agree on all of
    /// these for a checkpoint to be loadable. Returns the differing paths.
    pub fn arch_mismatches(&self, other: &Config) -> Vec<String> {
        let mut diffs = Vec::new();
        let a = serde_json::to_value(self).expect("serialize");
        let b = serde_json::to_value(other).expect("serialize");
        for section in ["understanding", "generative", "bridge", "vit"] {
            diff_value(&a[section], &b[section], section, &mut diffs);
        }
        if self.train.n_srt_tokens != other.train.n_srt_tokens {
            diffs.push("train.n_srt_tokens".into());
        }
        diffs
    }
}

fn diff_value(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let pa = ma.get(k).unwrap_or(&serde_json::Value::Null);
                let pb = mb.get(k).unwrap_or(&serde_json::Value::Null);
                diff_value(pa, pb, &format!("{path}.{k}"), out);
            }
        }
        _ => {
            if a != b {
                out.push(path.to_string());
            }
        }
    }
}

/// Resolved pairing between the experts' layers.
///
/// `bridged` holds `(understanding layer, generative aligned layer)` pairs;
/// generative aligned layer `j` is block `projector_depth + j` of the
/// generative stack. Surplus generative layers sit in front as the noise
/// projector so every aligned layer can participate in fusion.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct BridgePlan {
    pub projector_depth: usize,
    pub aligned_count: usize,
    pub bridged: Vec<(usize, usize)>,
}

impl BridgePlan {
    pub fn is_bridged_gen_layer(&self, aligned_idx: usize) -> bool {
        self.bridged.iter().any(|&(_, g)| g == aligned_idx)
    }

    pub fn und_layer_for_gen(&self, aligned_idx: usize) -> Option<usize> {
        self.bridged
            .iter()
            .find(|&&(_, g)| g == aligned_idx)
            .map(|&(u, _)| u)
    }

    /// Index of the aligner serving a given aligned layer (aligners are
    /// allocated in bridged order).
    pub fn aligner_slot(&self, aligned_idx: usize) -> Option<usize> {
        self.bridged.iter().position(|&(_, g)| g == aligned_idx)
    }
}

pub fn resolve_bridge_plan(
    u: &ExpertSpec,
    g: &ExpertSpec,
    b: &BridgeSpec,
) -> Result<BridgePlan> {
    if g.n_layers < u.n_layers {
        return Err(HbError::Config(format!(
            "unsupported configuration: generative depth {} below understanding depth {}",
            g.n_layers, u.n_layers
        )));
    }
    let aligned_count = u.n_layers;
    let projector_depth = g.n_layers - u.n_layers;
    let skip = b.skip_front + b.skip_back;

    if b.decoupled {
        if skip != aligned_count {
            return Err(HbError::Config(format!(
                "decoupled mode requires skip_front + skip_back = {aligned_count}, got {skip}"
            )));
        }
        return Ok(BridgePlan {
            projector_depth,
            aligned_count,
            bridged: Vec::new(),
        });
    }

    if skip >= aligned_count {
        return Err(HbError::Config(format!(
            "skip_front {} + skip_back {} leaves no bridged layer out of {aligned_count}; \
             set bridge.decoupled = true for an intentionally bridge-free model",
            b.skip_front, b.skip_back
        )));
    }

    let gen_range = b.skip_front..aligned_count - b.skip_back;
    let bridged = match b.fusion_mode {
        FusionMode::Deep => gen_range.map(|i| (i, i)).collect(),
        // Shallow fusion: every bridged generative layer reads the
        // understanding expert's final-layer keys/values.
        FusionMode::Shallow => gen_range.map(|i| (u.n_layers - 1, i)).collect(),
    };
    Ok(BridgePlan {
        projector_depth,
        aligned_count,
        bridged,
    })
}
