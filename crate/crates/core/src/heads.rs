//! Task heads: attentive-pool classification and per-position segmentation
//! on the token grid of reference.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Section, Tape, Var};
use crate::error::{Error, Result};
use crate::masking::TokenLayout;
use crate::nn::{AttentivePool, Linear};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ClassificationHead {
    pub pool: AttentivePool,
    pub dense: Linear,
}

impl ClassificationHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, width: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            pool: AttentivePool::new(store, "head.pool", width, rng),
            dense: Linear::new(store, "head.dense", width, classes, rng),
        }
    }

    /// `[1, classes]` logits from all encoded tokens.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, encoded: &[Var]) -> Var {
        let prev = tape.set_section(Section::Head);
        let all = if encoded.len() == 1 { encoded[0] } else { tape.concat_rows(encoded) };
        let pooled = self.pool.forward(tape, all);
        let out = self.dense.forward(tape, pooled);
        tape.set_section(prev);
        out
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.pool.params();
        p.extend(self.dense.params());
        p
    }
}

/// 1-D area-overlap weights `[dst, src]`: entry `(r, i)` is the fraction of
/// destination cell `r` covered by source cell `i`. Integer upsampling gives
/// replication, integer downsampling gives block averages.
pub fn overlap_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut w = Array2::zeros((dst, src));
    for r in 0..dst {
        let (lo, hi) = (r * src, (r + 1) * src);
        for i in 0..src {
            let (a, b) = (i * dst, (i + 1) * dst);
            let overlap = hi.min(b).saturating_sub(lo.max(a));
            w[[r, i]] = overlap as f64 / src as f64;
        }
    }
    w
}

/// `[dst², src²]` alignment matrix from a `src x src` token grid to a
/// `dst x dst` grid, row-major positions.
pub fn alignment_matrix(src: usize, dst: usize) -> Array2<f64> {
    let w = overlap_weights(src, dst);
    Array2::from_shape_fn((dst * dst, src * src), |(r, i)| w[[r / dst, i / src]] * w[[r % dst, i % src]])
}

/// Applies an alignment matrix to `[src², C]` rows.
pub fn align_to_reference(tokens: &Array2<f64>, src: usize, dst: usize) -> Result<Array2<f64>> {
    if tokens.nrows() != src * src {
        return Err(Error::shape(format!("{} tokens do not form a {src}x{src} grid", tokens.nrows())));
    }
    Ok(alignment_matrix(src, dst).dot(tokens))
}

#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub reference_side: usize,
    pub pool: AttentivePool,
    pub dense: Linear,
}

impl SegmentationHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        width: usize,
        classes: usize,
        reference_side: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            reference_side,
            pool: AttentivePool::new(store, "head.pool", width, rng),
            dense: Linear::new(store, "head.dense", width, classes, rng),
        }
    }

    /// `[L_ref, classes]` logits. Every `(modality, bin, group)` slab is
    /// aligned to the reference grid, then all slabs are pooled position by
    /// position.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, encoded: &[Var], layout: &TokenLayout) -> Var {
        let prev = tape.set_section(Section::Head);
        let dst = self.reference_side;
        let mut sets = Vec::new();
        for (k, l) in layout.modalities.iter().enumerate() {
            let side = (l.positions as f64).sqrt().round() as usize;
            let width = tape.shape(encoded[k]).1;
            let align = (side != dst).then(|| {
                let m = alignment_matrix(side, dst);
                tape.constant(dst * dst, side * side, m.iter().map(|&v| T::of(v)).collect())
            });
            for t in 0..l.bins {
                for g in 0..l.per_slot {
                    let slab = tape.rows((0..l.positions).map(|p| (encoded[k], l.index(t, p, g))).collect(), width);
                    sets.push(match align {
                        Some(a) => tape.matmul(a, slab),
                        None => slab,
                    });
                }
            }
        }
        let pooled = self.pool.forward_rows(tape, &sets);
        let out = self.dense.forward(tape, pooled);
        tape.set_section(prev);
        out
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.pool.params();
        p.extend(self.dense.params());
        p
    }
}

/// Reference cell of every label pixel for nearest upsampling from a
/// `reference x reference` grid to `label x label` pixels.
pub fn label_cells(reference: usize, label: usize) -> Vec<usize> {
    (0..label * label).map(|q| ((q / label) * reference / label) * reference + (q % label) * reference / label).collect()
}
