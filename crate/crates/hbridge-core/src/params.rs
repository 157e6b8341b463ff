//! Flat parameter bank with named, shaped segments.
//!
//! All model weights live in one `Vec<f64>` addressed through `SegId` handles
//! handed out at layout-build time. That makes the optimizer, the checkpoint
//! writer, the finite-difference checker, and per-chunk gradient buffers all
//! operate on plain slices without any pointer chasing.

use std::collections::HashMap;
use std::sync::Arc;

use crate::math::transpose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegId(pub usize);

#[derive(Clone, Debug)]
pub struct SegmentDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl SegmentDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Default)]
pub struct Layout {
    segs: Vec<SegmentDef>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn seg(&self, id: SegId) -> &SegmentDef {
        &self.segs[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<SegId> {
        self.by_name.get(name).copied().map(SegId)
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn num_segs(&self) -> usize {
        self.segs.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SegId, &SegmentDef)> {
        self.segs.iter().enumerate().map(|(i, s)| (SegId(i), s))
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    layout: Layout,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SegId {
        let name = name.into();
        assert!(
            !self.layout.by_name.contains_key(&name),
            "duplicate tensor name {name}"
        );
        let id = SegId(self.layout.segs.len());
        self.layout.by_name.insert(name.clone(), id.0);
        self.layout.segs.push(SegmentDef {
            name,
            rows,
            cols,
            offset: self.layout.total,
        });
        self.layout.total += rows * cols;
        id
    }

    pub fn vector(&mut self, name: impl Into<String>, len: usize) -> SegId {
        self.push(name, 1, len)
    }

    pub fn finish(self) -> Arc<Layout> {
        Arc::new(self.layout)
    }
}

/// Parameter values plus a per-segment frozen flag.
#[derive(Clone)]
pub struct Params {
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
    frozen: Vec<bool>,
}

impl Params {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        let segs = layout.num_segs();
        Params {
            layout,
            data: vec![0.0; n],
            frozen: vec![false; segs],
        }
    }

    pub fn seg(&self, id: SegId) -> &[f64] {
        &self.data[self.layout.seg(id).range()]
    }

    pub fn seg_mut(&mut self, id: SegId) -> &mut [f64] {
        let r = self.layout.seg(id).range();
        &mut self.data[r]
    }

    pub fn is_frozen(&self, id: SegId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: SegId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen_flags(&mut self, flags: &[bool]) {
        assert_eq!(flags.len(), self.frozen.len());
        self.frozen.copy_from_slice(flags);
    }

    /// Bitwise snapshot of one segment, for frozen-invariance checks.
    pub fn seg_bits(&self, id: SegId) -> Vec<u64> {
        self.seg(id).iter().map(|v| v.to_bits()).collect()
    }
}

/// Gradient buffer aligned with a `Params` bank.
pub struct Grads {
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl Grads {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        Grads {
            layout,
            data: vec![0.0; n],
        }
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn seg(&self, id: SegId) -> &[f64] {
        &self.data[self.layout.seg(id).range()]
    }

    pub fn seg_mut(&mut self, id: SegId) -> &mut [f64] {
        let r = self.layout.seg(id).range();
        &mut self.data[r]
    }

    /// Two disjoint mutable segment views (e.g. a weight and its bias).
    pub fn seg_pair_mut(&mut self, a: SegId, b: SegId) -> (&mut [f64], &mut [f64]) {
        let ra = self.layout.seg(a).range();
        let rb = self.layout.seg(b).range();
        assert!(ra.end <= rb.start || rb.end <= ra.start, "overlapping segments");
        if ra.start < rb.start {
            let (lo, hi) = self.data.split_at_mut(rb.start);
            (&mut lo[ra], &mut hi[..rb.end - rb.start])
        } else {
            let (lo, hi) = self.data.split_at_mut(ra.start);
            let hi_slice = &mut hi[..ra.end - ra.start];
            (hi_slice, &mut lo[rb])
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }
}

/// Transposed copies of every matrix segment, rebuilt whenever the underlying
/// parameters change (once per micro-batch during training). Backward passes
/// read these so the input-gradient kernel streams contiguous rows.
pub struct TransposedWeights {
    by_seg: Vec<Option<Vec<f64>>>,
}

impl TransposedWeights {
    pub fn build(params: &Params) -> Self {
        let mut by_seg = Vec::with_capacity(params.layout.num_segs());
        for (_, def) in params.layout.iter() {
            if def.rows > 1 && def.cols > 1 {
                let w = &params.data[def.range()];
                by_seg.push(Some(transpose(w, def.rows, def.cols)));
            } else {
                by_seg.push(None);
            }
        }
        TransposedWeights { by_seg }
    }

    pub fn get(&self, id: SegId) -> &[f64] {
        self.by_seg[id.0]
            .as_deref()
            .expect("segment has no transposed copy")
    }
}
