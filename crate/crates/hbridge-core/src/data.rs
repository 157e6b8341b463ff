//! Synthetic caption -> pattern task.
//!
//! A pattern is a 16x16x3 array in [-1, 1]: one of four glyphs drawn in one
//! of four colors, in one of four quadrants, at one of two sizes, over a
//! fixed background. 128 distinct patterns exist, so conditional fidelity is
//! measurable by exhaustive nearest-neighbour decoding against the renders.
//!
//! Captions are six token ids over a 16-symbol vocabulary:
//! `[BOS, shape, color, quadrant, size, EOS]` with each attribute offset into
//! its own id block.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HbError, Result};
use crate::rng::Rng;

pub const PATTERN_SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const PATTERN_LEN: usize = PATTERN_SIDE * PATTERN_SIDE * CHANNELS;
pub const PATCH_SIDE: usize = 4;
pub const PATCH_GRID: usize = PATTERN_SIDE / PATCH_SIDE;
pub const N_LATENT_TOKENS: usize = PATCH_GRID * PATCH_GRID;
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;

pub const CAPTION_LEN: usize = 6;
pub const VOCAB_SIZE: usize = 16;
pub const BOS: u16 = 0;
pub const EOS: u16 = 1;
const SHAPE_BASE: u16 = 2;
const COLOR_BASE: u16 = 6;
const QUAD_BASE: u16 = 10;
const SIZE_BASE: u16 = 14;

pub const N_SHAPES: usize = 4;
pub const N_COLORS: usize = 4;
pub const N_QUADRANTS: usize = 4;
pub const N_SIZES: usize = 2;
pub const N_CLASSES: usize = N_SHAPES * N_COLORS * N_QUADRANTS * N_SIZES;

pub const BACKGROUND: f64 = -1.0;

const COLORS: [[f64; 3]; N_COLORS] = [
    [1.0, -1.0, -1.0],  // red
    [-1.0, 1.0, -1.0],  // green
    [-1.0, -1.0, 1.0],  // blue
    [1.0, 1.0, 1.0],    // white
];

/// One point of the closed attribute world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attrs {
    pub shape: u8,
    pub color: u8,
    pub quadrant: u8,
    pub size: u8,
}

impl Attrs {
    pub fn new(shape: u8, color: u8, quadrant: u8, size: u8) -> Result<Attrs> {
        if shape as usize >= N_SHAPES
            || color as usize >= N_COLORS
            || quadrant as usize >= N_QUADRANTS
            || size as usize >= N_SIZES
        {
            return Err(HbError::Input(format!(
                "attribute tuple out of range: {shape} {color} {quadrant} {size}"
            )));
        }
        Ok(Attrs { shape, color, quadrant, size })
    }

    /// Canonical tuple index, also the tie-break order for decoding.
    pub fn index(&self) -> usize {
        ((self.shape as usize * N_COLORS + self.color as usize) * N_QUADRANTS
            + self.quadrant as usize)
            * N_SIZES
            + self.size as usize
    }

    pub fn from_index(idx: usize) -> Attrs {
        debug_assert!(idx < N_CLASSES);
        Attrs {
            shape: (idx / (N_COLORS * N_QUADRANTS * N_SIZES)) as u8,
            color: (idx / (N_QUADRANTS * N_SIZES) % N_COLORS) as u8,
            quadrant: (idx / N_SIZES % N_QUADRANTS) as u8,
            size: (idx % N_SIZES) as u8,
        }
    }

    pub fn caption(&self) -> [u16; CAPTION_LEN] {
        [
            BOS,
            SHAPE_BASE + self.shape as u16,
            COLOR_BASE + self.color as u16,
            QUAD_BASE + self.quadrant as u16,
            SIZE_BASE + self.size as u16,
            EOS,
        ]
    }

    pub fn from_caption(tokens: &[u16]) -> Result<Attrs> {
        if tokens.len() != CAPTION_LEN || tokens[0] != BOS || tokens[5] != EOS {
            return Err(HbError::Input(format!("malformed caption {tokens:?}")));
        }
        let in_block = |t: u16, base: u16, n: usize| -> Result<u8> {
            if t >= base && (t - base) < n as u16 {
                Ok((t - base) as u8)
            } else {
                Err(HbError::Input(format!("token {t} outside block at {base}")))
            }
        };
        Attrs::new(
            in_block(tokens[1], SHAPE_BASE, N_SHAPES)?,
            in_block(tokens[2], COLOR_BASE, N_COLORS)?,
            in_block(tokens[3], QUAD_BASE, N_QUADRANTS)?,
            in_block(tokens[4], SIZE_BASE, N_SIZES)?,
        )
    }

    pub fn uniform(rng: &mut Rng) -> Attrs {
        Attrs {
            shape: rng.below(N_SHAPES) as u8,
            color: rng.below(N_COLORS) as u8,
            quadrant: rng.below(N_QUADRANTS) as u8,
            size: rng.below(N_SIZES) as u8,
        }
    }
}

fn glyph_hit(shape: u8, dx: i32, dy: i32, r: i32) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,                         // square
        1 => dx * dx + dy * dy <= r * r,                             // disk
        2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2,              // triangle
        _ => (dy == 0 && dx.abs() <= r) || (dx == 0 && dy.abs() <= r), // plus
    }
}

/// Deterministic rasterization of one attribute tuple.
pub fn render(attrs: Attrs) -> Vec<f64> {
    let mut p = vec![BACKGROUND; PATTERN_LEN];
    let r = if attrs.size == 0 { 2 } else { 3 };
    let qx = (attrs.quadrant & 1) as i32 * 8 + 4;
    let qy = (attrs.quadrant >> 1) as i32 * 8 + 4;
    let color = COLORS[attrs.color as usize];
    for y in 0..PATTERN_SIDE as i32 {
        for x in 0..PATTERN_SIDE as i32 {
            if glyph_hit(attrs.shape, x - qx, y - qy, r) {
                let base = (y as usize * PATTERN_SIDE + x as usize) * CHANNELS;
                p[base..base + 3].copy_from_slice(&color);
            }
        }
    }
    p
}

/// All 128 reference renders in tuple-index order.
pub fn reference_renders() -> Vec<Vec<f64>> {
    (0..N_CLASSES).map(|i| render(Attrs::from_index(i))).collect()
}

/// Row-major 4x4 patches, channels interleaved per pixel within each patch.
pub fn patchify(pattern: &[f64]) -> Vec<f64> {
    debug_assert_eq!(pattern.len(), PATTERN_LEN);
    let mut out = vec![0.0; N_LATENT_TOKENS * PATCH_DIM];
    for py in 0..PATCH_GRID {
        for px in 0..PATCH_GRID {
            let tok = py * PATCH_GRID + px;
            for dy in 0..PATCH_SIDE {
                for dx in 0..PATCH_SIDE {
                    let y = py * PATCH_SIDE + dy;
                    let x = px * PATCH_SIDE + dx;
                    let src = (y * PATTERN_SIDE + x) * CHANNELS;
                    let dst = tok * PATCH_DIM + (dy * PATCH_SIDE + dx) * CHANNELS;
                    out[dst..dst + CHANNELS].copy_from_slice(&pattern[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &[f64]) -> Vec<f64> {
    debug_assert_eq!(tokens.len(), N_LATENT_TOKENS * PATCH_DIM);
    let mut out = vec![0.0; PATTERN_LEN];
    for py in 0..PATCH_GRID {
        for px in 0..PATCH_GRID {
            let tok = py * PATCH_GRID + px;
            for dy in 0..PATCH_SIDE {
                for dx in 0..PATCH_SIDE {
                    let y = py * PATCH_SIDE + dy;
                    let x = px * PATCH_SIDE + dx;
                    let dst = (y * PATTERN_SIDE + x) * CHANNELS;
                    let src = tok * PATCH_DIM + (dy * PATCH_SIDE + dx) * CHANNELS;
                    out[dst..dst + CHANNELS].copy_from_slice(&tokens[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}

/// Nearest reference render in MSE; ties break to the lowest tuple index.
pub fn decode_attributes(pattern: &[f64], renders: &[Vec<f64>]) -> Attrs {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, r) in renders.iter().enumerate() {
        let mut d = 0.0;
        for (a, b) in pattern.iter().zip(r) {
            let e = a - b;
            d += e * e;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Attrs::from_index(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub tokens: [u16; CAPTION_LEN],
    pub pattern: Vec<f64>,
}

impl DatasetRecord {
    pub fn from_attrs(attrs: Attrs) -> DatasetRecord {
        DatasetRecord {
            tokens: attrs.caption(),
            pattern: render(attrs),
        }
    }
}

pub fn make_dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = Rng::derive(seed, 0x8bd5);
    (0..n)
        .map(|_| DatasetRecord::from_attrs(Attrs::uniform(&mut rng)))
        .collect()
}

const DATASET_MAGIC: &[u8; 4] = b"HBDS";
const DATASET_VERSION: u32 = 1;

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + records.len() * (2 * CAPTION_LEN + 4 * PATTERN_LEN));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        for t in &rec.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        debug_assert_eq!(rec.pattern.len(), PATTERN_LEN);
        for v in &rec.pattern {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(HbError::Format(format!(
                "dataset truncated at byte {} of {}",
                *off,
                bytes.len()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let mut off = 0usize;
    if take(&mut off, 4)? != DATASET_MAGIC {
        return Err(HbError::Format("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(HbError::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens = [0u16; CAPTION_LEN];
        for t in tokens.iter_mut() {
            let b = take(&mut off, 2)?;
            *t = u16::from_le_bytes([b[0], b[1]]);
            if *t >= VOCAB_SIZE as u16 {
                return Err(HbError::Format(format!("token id {t} out of vocabulary")));
            }
        }
        let mut pattern = Vec::with_capacity(PATTERN_LEN);
        for _ in 0..PATTERN_LEN {
            let b = take(&mut off, 4)?;
            pattern.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        records.push(DatasetRecord { tokens, pattern });
    }
    if off != bytes.len() {
        return Err(HbError::Format(format!(
            "dataset has {} trailing bytes",
            bytes.len() - off
        )));
    }
    Ok(records)
}

/// Map a pattern to a P6 portable pixmap for eyeballing samples.
pub fn pattern_to_ppm(pattern: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{PATTERN_SIDE} {PATTERN_SIDE}\n255\n").into_bytes();
    for v in pattern {
        let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        out.push(byte);
    }
    out
}

pub fn write_ppm(path: &Path, pattern: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pattern_to_ppm(pattern))?;
    Ok(())
}
