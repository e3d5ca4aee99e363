//! Two-stage mask sampling.
//!
//! Stage one masks whole modalities, whole `(modality, position)` columns and
//! whole `(modality, bin)` slabs, each with its own probability. Stage two
//! masks or unmasks uniformly drawn tokens until exactly `nint(M·N)` tokens
//! are masked.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::config::{token_counts, DatasetSpec, Multispectral, StructuredProbs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModalityLayout {
    pub modality: usize,
    pub positions: usize,
    pub bins: usize,
    /// Tokens per `(bin, position)` slot.
    pub per_slot: usize,
}

impl ModalityLayout {
    pub fn len(&self) -> usize {
        self.positions * self.bins * self.per_slot
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, bin: usize, position: usize, group: usize) -> usize {
        (bin * self.positions + position) * self.per_slot + group
    }
}

/// Global token layout: modalities concatenated in declaration order, each
/// in `(bin, position, group)` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenLayout {
    pub modalities: Vec<ModalityLayout>,
}

impl TokenLayout {
    pub fn from_dataset(dataset: &DatasetSpec, multispectral: Multispectral) -> Self {
        let modalities = dataset
            .active_modalities()
            .map(|(i, m)| {
                let c = token_counts(m, multispectral);
                ModalityLayout {
                    modality: i,
                    positions: c.positions,
                    bins: c.bins,
                    per_slot: c.sequence_length / (c.positions * c.bins).max(1),
                }
            })
            .collect();
        Self { modalities }
    }

    pub fn total(&self) -> usize {
        self.modalities.iter().map(ModalityLayout::len).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.modalities
            .iter()
            .map(|m| {
                let o = acc;
                acc += m.len();
                o
            })
            .collect()
    }

    pub fn get(&self, modality: usize) -> Option<&ModalityLayout> {
        self.modalities.iter().find(|m| m.modality == modality)
    }
}

/// Nearest integer with halves rounded up.
pub fn nint(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

pub fn structured_mask<R: Rng + ?Sized>(layout: &TokenLayout, probs: &StructuredProbs, rng: &mut R) -> Vec<bool> {
    let mut mask = Vec::with_capacity(layout.total());
    for m in &layout.modalities {
        let whole = rng.gen_bool(probs.modality.clamp(0.0, 1.0));
        let pos: Vec<bool> = (0..m.positions).map(|_| rng.gen_bool(probs.spatial.clamp(0.0, 1.0))).collect();
        let bins: Vec<bool> = (0..m.bins).map(|_| rng.gen_bool(probs.temporal.clamp(0.0, 1.0))).collect();
        for t in 0..m.bins {
            for p in 0..m.positions {
                let masked = whole || pos[p] || bins[t];
                mask.extend(std::iter::repeat(masked).take(m.per_slot));
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub total_tokens: usize,
    pub masked_count: usize,
    pub offsets: Vec<usize>,
    pub layout: TokenLayout,
}

impl MaskPlan {
    /// Mask flags of the `k`-th entry of the layout.
    pub fn modality_mask(&self, k: usize) -> &[bool] {
        let start = self.offsets[k];
        &self.mask[start..start + self.layout.modalities[k].len()]
    }

    /// Local indices of visible tokens of the `k`-th layout entry.
    pub fn visible(&self, k: usize) -> Vec<usize> {
        self.modality_mask(k).iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
    }

    /// Plan with every token visible.
    pub fn none(layout: &TokenLayout) -> Self {
        Self {
            mask: vec![false; layout.total()],
            total_tokens: layout.total(),
            masked_count: 0,
            offsets: layout.offsets(),
            layout: layout.clone(),
        }
    }
}

pub fn adjust_to_ratio<R: Rng + ?Sized>(
    layout: &TokenLayout,
    mut mask: Vec<bool>,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = mask.len();
    if n != layout.total() {
        return Err(Error::shape(format!("mask has {n} entries, layout has {}", layout.total())));
    }
    let target = nint(ratio * n as f64);
    if target == 0 || target >= n {
        return Err(Error::DegenerateMasking { masked: target, total: n });
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked != target {
        let flip_from = masked > target;
        let mut candidates: Vec<usize> = (0..n).filter(|&i| mask[i] == flip_from).collect();
        candidates.shuffle(rng);
        for &i in candidates.iter().take(masked.abs_diff(target)) {
            mask[i] = !flip_from;
        }
    }
    Ok(MaskPlan { mask, total_tokens: n, masked_count: target, offsets: layout.offsets(), layout: layout.clone() })
}

pub fn sample_plan<R: Rng + ?Sized>(
    layout: &TokenLayout,
    probs: &StructuredProbs,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let mask = structured_mask(layout, probs, rng);
    adjust_to_ratio(layout, mask, ratio, rng)
}
