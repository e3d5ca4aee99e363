//! Reconstruction targets and the L1 reconstruction loss.
//!
//! Three target flavors: raw patches, patches standardized as a whole, and
//! patches standardized independently within each band group. The standard
//! deviation is the population one and is floored at `eps`.

use serde::Serialize;

use crate::config::TargetNorm;
use crate::scalar::Scalar;
use crate::tokenizer::PatchGrid;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitStats {
    pub mean: f64,
    pub std: f64,
}

fn mean_std<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> (T, T) {
    let n = T::of_usize(values.clone().count());
    let mean = values.clone().sum::<T>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Normalizes one flattened patch. `groups` holds the patch-vector indices
/// of each band group (see [`crate::tokenizer::group_indices`]).
pub fn normalize_patch<T: Scalar>(x: &[T], groups: &[Vec<usize>], mode: TargetNorm, eps: T) -> (Vec<T>, Vec<UnitStats>) {
    match mode {
        TargetNorm::None => (x.to_vec(), Vec::new()),
        TargetNorm::Patch => {
            let (mu, sd) = mean_std(x.iter().copied());
            let denom = sd.max(eps);
            let out = x.iter().map(|&v| (v - mu) / denom).collect();
            (out, vec![UnitStats { mean: mu.to_f64_lossy(), std: sd.to_f64_lossy() }])
        }
        TargetNorm::PatchGroup => {
            let mut out = x.to_vec();
            let mut stats = Vec::with_capacity(groups.len());
            for idx in groups {
                let (mu, sd) = mean_std(idx.iter().map(|&i| x[i]));
                let denom = sd.max(eps);
                for &i in idx {
                    out[i] = (x[i] - mu) / denom;
                }
                stats.push(UnitStats { mean: mu.to_f64_lossy(), std: sd.to_f64_lossy() });
            }
            (out, stats)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTargets<T> {
    pub grid: PatchGrid<T>,
    /// Per `(position, bin)`, one entry per normalization unit.
    pub stats: Vec<Vec<UnitStats>>,
}

pub fn normalize_targets<T: Scalar>(
    patches: &PatchGrid<T>,
    groups: &[Vec<usize>],
    mode: TargetNorm,
    eps: T,
) -> NormalizedTargets<T> {
    let mut grid = patches.clone();
    let mut stats = Vec::with_capacity(patches.positions() * patches.bins());
    let dim = patches.patch_dim();
    let flat = grid.data.as_slice_mut().expect("standard layout");
    for chunk in flat.chunks_mut(dim) {
        let (n, s) = normalize_patch(chunk, groups, mode, eps);
        chunk.copy_from_slice(&n);
        stats.push(s);
    }
    NormalizedTargets { grid, stats }
}

/// One modality's contribution to the loss.
#[derive(Debug, Clone)]
pub struct LossTerm<'a, T> {
    /// Already-normalized targets.
    pub targets: &'a PatchGrid<T>,
    pub recon: &'a PatchGrid<T>,
    pub groups: &'a [Vec<usize>],
    /// Masked flag per token in `(bin, position, group)` order; one token per
    /// slot for joint-token, one per band group for token-based.
    pub masked: &'a [bool],
    pub token_based: bool,
}

/// Reference (non-differentiable) implementation of the reconstruction
/// loss. With `masked_only`, numerator and denominator run over masked
/// tokens only.
pub fn reconstruction_loss<T: Scalar>(terms: &[LossTerm<'_, T>], mode: TargetNorm, masked_only: bool) -> T {
    let mut numerator = T::zero();
    let mut denominator = T::zero();
    for term in terms {
        let (npos, bins, _) = term.targets.data.dim();
        let g = term.groups.len();
        let per_slot = if term.token_based { g } else { 1 };
        for t in 0..bins {
            for p in 0..npos {
                let target = term.targets.patch(p, t);
                let recon = term.recon.patch(p, t);
                for slot in 0..per_slot {
                    let token = (t * npos + p) * per_slot + slot;
                    if masked_only && !term.masked[token] {
                        continue;
                    }
                    let l1 = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| (target[i] - recon[i]).abs()).sum::<T>();
                    if term.token_based {
                        numerator += l1(&mut term.groups[slot].iter().copied());
                        denominator += match mode {
                            TargetNorm::PatchGroup => T::one(),
                            _ => T::one() / T::of_usize(g),
                        };
                    } else {
                        numerator += l1(&mut (0..target.len()));
                        denominator += match mode {
                            TargetNorm::PatchGroup => T::of_usize(g),
                            _ => T::one(),
                        };
                    }
                }
            }
        }
    }
    if denominator == T::zero() {
        T::zero()
    } else {
        numerator / denominator
    }
}
