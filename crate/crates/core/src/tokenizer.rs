//! Patchification and the modality-specific linear tokenizers.
//!
//! A patch is flattened channel-major, then row, then column:
//! element `(c, r, q)` of a `P x P` patch lands at `c·P² + r·P + q`. Band
//! groups therefore occupy a union of contiguous `P²`-long blocks.
//!
//! Tokens of one modality are ordered `(bin, position, group)`, with the
//! group index only present for token-based multispectral fusion.

use ndarray::{Array3, Array4, ArrayView4};
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::{ModalitySpec, Multispectral};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear};
use crate::scalar::Scalar;

/// `[positions, bins, P²·C]`
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<A> {
    pub patch_size: usize,
    pub channels: usize,
    pub data: Array3<A>,
}

impl<A: Copy> PatchGrid<A> {
    pub fn positions(&self) -> usize {
        self.data.dim().0
    }

    pub fn bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn patch_dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn patch(&self, position: usize, bin: usize) -> &[A] {
        let d = self.patch_dim();
        let flat = self.data.as_slice().expect("standard layout");
        let start = (position * self.bins() + bin) * d;
        &flat[start..start + d]
    }
}

pub fn patchify<A: Copy>(image: ArrayView4<A>, patch_size: usize) -> Result<PatchGrid<A>> {
    let (d, c, h, w) = image.dim();
    if h != w {
        return Err(Error::shape(format!("image is {h}x{w}, expected square")));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::shape(format!("patch {patch_size} does not divide image {h}")));
    }
    let p = patch_size;
    let side = h / p;
    let data = Array3::from_shape_fn((side * side, d, c * p * p), |(pos, t, k)| {
        let (gr, gc) = (pos / side, pos % side);
        let (ch, rem) = (k / (p * p), k % (p * p));
        image[[t, ch, gr * p + rem / p, gc * p + rem % p]]
    });
    Ok(PatchGrid { patch_size, channels: c, data })
}

pub fn unpatchify<A: Copy>(grid: &PatchGrid<A>) -> Result<Array4<A>> {
    let (npos, d, dim) = grid.data.dim();
    let p = grid.patch_size;
    let side = (npos as f64).sqrt().round() as usize;
    if side * side != npos {
        return Err(Error::shape(format!("{npos} patches do not form a square grid")));
    }
    if p == 0 || dim != p * p * grid.channels {
        return Err(Error::shape(format!(
            "patch length {dim} differs from P²·C = {}",
            p * p * grid.channels
        )));
    }
    let i = side * p;
    Ok(Array4::from_shape_fn((d, grid.channels, i, i), |(t, ch, y, x)| {
        let pos = (y / p) * side + x / p;
        grid.data[[pos, t, ch * p * p + (y % p) * p + x % p]]
    }))
}

/// Indices into a flattened patch vector covered by each band group.
pub fn group_indices(band_groups: &[Vec<usize>], patch_size: usize) -> Vec<Vec<usize>> {
    let pp = patch_size * patch_size;
    band_groups.iter().map(|g| g.iter().flat_map(|&c| c * pp..(c + 1) * pp).collect()).collect()
}

/// Learnable per-modality tokenizer: patch embedding, output projection
/// and mask token.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub modality: String,
    pub multispectral: Multispectral,
    pub patch_size: usize,
    pub groups: Vec<Vec<usize>>,
    /// One embedding for joint-token, one per band group for token-based.
    pub embed: Vec<Linear>,
    pub project: Vec<Linear>,
    pub mask_token: ParamId,
}

impl Tokenizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        spec: &ModalitySpec,
        multispectral: Multispectral,
        encoder_width: usize,
        decoder_width: usize,
        rng: &mut R,
    ) -> Self {
        let name = format!("tokenizer.{}", spec.name);
        let groups = group_indices(&spec.band_groups, spec.patch_size);
        let dims: Vec<usize> = match multispectral {
            Multispectral::JointToken => vec![spec.patch_dim()],
            Multispectral::TokenBased => groups.iter().map(Vec::len).collect(),
        };
        let embed = dims
            .iter()
            .enumerate()
            .map(|(g, &d)| Linear::new(store, &format!("{name}.embed.{g}"), d, encoder_width, rng))
            .collect();
        let project = dims
            .iter()
            .enumerate()
            .map(|(g, &d)| Linear::new(store, &format!("{name}.project.{g}"), decoder_width, d, rng))
            .collect();
        let mask_token = store.add(format!("{name}.mask_token"), 1, decoder_width, gaussian(rng, decoder_width, 0.02));
        Self { modality: spec.name.clone(), multispectral, patch_size: spec.patch_size, groups, embed, project, mask_token }
    }

    /// Tokens per `(bin, position)` slot.
    pub fn tokens_per_slot(&self) -> usize {
        self.embed.len()
    }

    /// Input rows in `(bin, position)` order for each embedding.
    pub fn input_rows<T: Scalar>(&self, grid: &PatchGrid<f32>) -> Vec<(usize, usize, Vec<T>)> {
        let (npos, d, dim) = grid.data.dim();
        let rows = npos * d;
        match self.multispectral {
            Multispectral::JointToken => {
                let mut v = Vec::with_capacity(rows * dim);
                for t in 0..d {
                    for p in 0..npos {
                        v.extend(grid.patch(p, t).iter().map(|&x| T::of(f64::from(x))));
                    }
                }
                vec![(rows, dim, v)]
            }
            Multispectral::TokenBased => self
                .groups
                .iter()
                .map(|idx| {
                    let mut v = Vec::with_capacity(rows * idx.len());
                    for t in 0..d {
                        for p in 0..npos {
                            let patch = grid.patch(p, t);
                            v.extend(idx.iter().map(|&i| T::of(f64::from(patch[i]))));
                        }
                    }
                    (rows, idx.len(), v)
                })
                .collect(),
        }
    }

    /// `[L_m x C_e]` tokens in canonical `(bin, position, group)` order.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, grid: &PatchGrid<f32>) -> Var {
        let inputs = self.input_rows::<T>(grid);
        let parts: Vec<Var> = inputs
            .into_iter()
            .zip(&self.embed)
            .map(|((r, c, v), lin)| {
                let x = tape.constant(r, c, v);
                lin.forward(tape, x)
            })
            .collect();
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = tape.shape(parts[0]).0;
        let width = tape.shape(parts[0]).1;
        let sources = (0..rows).flat_map(|r| parts.iter().map(move |&p| (p, r))).collect();
        tape.rows(sources, width)
    }

    /// Reconstructed patch vectors from decoded tokens in canonical order.
    /// Returns one matrix per embedding, each in `(bin, position)` row order.
    pub fn project_out<T: Scalar>(&self, tape: &mut Tape<'_, T>, decoded: Var) -> Vec<Var> {
        let g = self.project.len();
        if g == 1 {
            return vec![self.project[0].forward(tape, decoded)];
        }
        let (rows, width) = tape.shape(decoded);
        (0..g)
            .map(|gi| {
                let picked = tape.rows((0..rows / g).map(|r| (decoded, r * g + gi)).collect(), width);
                self.project[gi].forward(tape, picked)
            })
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.embed.iter().chain(&self.project).flat_map(Linear::params).collect();
        p.push(self.mask_token);
        p
    }
}
