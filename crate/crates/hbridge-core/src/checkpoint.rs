//! Binary checkpoint format.
//!
//! Layout: magic `HBRD`, format version (u32 LE), JSON header length
//! (u64 LE), the JSON header, then the raw payload: every tensor as
//! little-endian f32 in header order, followed (when optimizer state is
//! present) by first/second moment pairs for each trainable tensor.
//! Save -> load -> save is byte-identical; a truncated or mismatched file is
//! rejected before any state is touched.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HbError, Result};
use crate::model::ModelBundle;
use crate::params::Params;
use crate::trainer::AdamW;

const MAGIC: &[u8; 4] = b"HBRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RngState {
    pub batch: [u64; 4],
    pub flow: [u64; 4],
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct OptimMeta {
    pub step_count: u64,
    /// Names, in payload order, of tensors whose (m, v) pairs follow the
    /// parameter payload.
    pub tensors: Vec<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: Config,
    pub trained_steps: u64,
    pub tensors: Vec<TensorMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimMeta>,
    pub rng: RngState,
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Vec<f64>>,
    pub moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &Config,
    params: &Params,
    opt: Option<&AdamW>,
    rng: RngState,
    trained_steps: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (id, def) in params.layout.iter() {
        tensors.push(TensorMeta {
            name: def.name.clone(),
            rows: def.rows,
            cols: def.cols,
            dtype: "f32".into(),
            frozen: params.is_frozen(id),
        });
    }
    let optimizer = opt.map(|o| OptimMeta {
        step_count: o.step_count,
        tensors: params
            .layout
            .iter()
            .filter(|(id, _)| o.has_state_for(*id))
            .map(|(_, def)| def.name.clone())
            .collect(),
    });
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        trained_steps,
        tensors,
        optimizer,
        rng,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| HbError::Internal(format!("header serialize: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (id, _) in params.layout.iter() {
        push_f32(&mut buf, params.seg(id));
    }
    if let Some(o) = opt {
        for (id, _) in params.layout.iter() {
            if let Some((m, v)) = o.moment_slices(id) {
                push_f32(&mut buf, m);
                push_f32(&mut buf, v);
            }
        }
    }

    let tmp = path.with_extension("hbrd.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    let need = |off: usize, n: usize| -> Result<&[u8]> {
        bytes.get(off..off + n).ok_or_else(|| {
            HbError::Format(format!(
                "corrupt checkpoint: truncated at byte {off} of {}",
                bytes.len()
            ))
        })
    };
    if need(0, 4)? != MAGIC {
        return Err(HbError::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(HbError::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(need(8, 8)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(need(16, header_len)?)
        .map_err(|e| HbError::Format(format!("corrupt checkpoint header: {e}")))?;

    let mut off = 16 + header_len;
    let read_f64s = |off: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = bytes.get(*off..*off + 4 * n).ok_or_else(|| {
            HbError::Format(format!(
                "corrupt checkpoint: payload truncated at byte {}",
                *off
            ))
        })?;
        *off += 4 * n;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };

    let mut tensors = HashMap::new();
    for meta in &header.tensors {
        if meta.dtype != "f32" {
            return Err(HbError::Format(format!(
                "tensor {} has unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let data = read_f64s(&mut off, meta.rows * meta.cols)?;
        if tensors.insert(meta.name.clone(), data).is_some() {
            return Err(HbError::Format(format!("duplicate tensor {}", meta.name)));
        }
    }
    let mut moments = HashMap::new();
    if let Some(optim) = &header.optimizer {
        let sizes: HashMap<&str, usize> = header
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.rows * t.cols))
            .collect();
        for name in &optim.tensors {
            let n = *sizes.get(name.as_str()).ok_or_else(|| {
                HbError::Format(format!("optimizer state for unknown tensor {name}"))
            })?;
            let m = read_f64s(&mut off, n)?;
            let v = read_f64s(&mut off, n)?;
            moments.insert(name.clone(), (m, v));
        }
    }
    if off != bytes.len() {
        return Err(HbError::Format(format!(
            "corrupt checkpoint: {} trailing bytes",
            bytes.len() - off
        )));
    }
    Ok(LoadedCheckpoint {
        header,
        tensors,
        moments,
    })
}

/// Copy parameter values from a loaded checkpoint into a live bank, after
/// verifying that the architectures agree. Frozen flags and optimizer state
/// are the caller's business (they depend on the new run's phase).
pub fn install_params(
    loaded: &LoadedCheckpoint,
    bundle: &ModelBundle,
    params: &mut Params,
) -> Result<()> {
    let mismatches = bundle.cfg.arch_mismatches(&loaded.header.config);
    if !mismatches.is_empty() {
        return Err(HbError::Config(format!(
            "checkpoint config differs in: {}",
            mismatches.join(", ")
        )));
    }
    for (id, def) in params.layout.clone().iter() {
        let data = loaded.tensors.get(&def.name).ok_or_else(|| {
            HbError::Format(format!("checkpoint missing tensor {}", def.name))
        })?;
        if data.len() != def.len() {
            return Err(HbError::Format(format!(
                "tensor {} has {} values, expected {}",
                def.name,
                data.len(),
                def.len()
            )));
        }
        params.seg_mut(id).copy_from_slice(data);
    }
    Ok(())
}

/// Restore optimizer moment state saved alongside the parameters.
pub fn install_moments(loaded: &LoadedCheckpoint, params: &Params, opt: &mut AdamW) -> Result<()> {
    if let Some(meta) = &loaded.header.optimizer {
        opt.step_count = meta.step_count;
        for (id, def) in params.layout.iter() {
            if let Some((m, v)) = loaded.moments.get(&def.name) {
                opt.set_moments(id, m.clone(), v.clone());
            }
        }
    }
    Ok(())
}
