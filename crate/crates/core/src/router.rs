//! Fusion-mode routing: which `(modality, bin)` slabs are encoded together
//! and with which parameter set.

use serde::Serialize;

use crate::config::{token_counts, DatasetSpec, FusionConfig, FusionMode, ModelDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slab {
    pub modality: usize,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sequence {
    pub slabs: Vec<Slab>,
    pub param_set: usize,
    /// Full (unmasked) token count.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutingPlan {
    pub mode: FusionMode,
    pub sequences: Vec<Sequence>,
    /// Names of the per-sequence parameter sets, indexed by `param_set`.
    pub param_sets: Vec<String>,
    /// Encoder block index where the shared fusion stack takes over.
    pub fusion_boundary: Option<usize>,
    /// Tokens per `(bin, position)` slot of each modality (0 if inactive).
    pub slab_sizes: Vec<usize>,
}

impl RoutingPlan {
    pub fn encoder_param_sets(&self) -> usize {
        self.param_sets.len()
    }

    /// Per-sequence parameter sets plus the fusion set, if any.
    pub fn total_param_sets(&self) -> usize {
        self.param_sets.len() + usize::from(self.fusion_boundary.is_some())
    }

    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.length).collect()
    }

    /// Index of the sequence holding `(modality, bin)` and the slab's rank in it.
    pub fn locate(&self, modality: usize, bin: usize) -> Option<(usize, usize)> {
        self.sequences.iter().enumerate().find_map(|(si, s)| {
            s.slabs.iter().position(|sl| sl.modality == modality && sl.bin == bin).map(|k| (si, k))
        })
    }
}

pub fn build_routing(dataset: &DatasetSpec, fusion: &FusionConfig, dims: &ModelDims) -> Result<RoutingPlan> {
    let slab_sizes: Vec<usize> = dataset
        .modalities
        .iter()
        .map(|m| if m.is_active() { token_counts(m, fusion.multispectral).sequence_length / m.temporal_bins } else { 0 })
        .collect();
    let active: Vec<usize> = dataset.active_modalities().map(|(i, _)| i).collect();
    if active.is_empty() {
        return Err(Error::EmptyModel);
    }
    let bins = |m: usize| dataset.modalities[m].temporal_bins;
    let slabs_of = |m: usize| (0..bins(m)).map(move |t| Slab { modality: m, bin: t });
    let seq = |slabs: Vec<Slab>, param_set: usize| {
        let length = slabs.iter().map(|s| slab_sizes[s.modality]).sum();
        Sequence { slabs, param_set, length }
    };
    let names = |ms: &[usize]| ms.iter().map(|&m| dataset.modalities[m].name.clone()).collect::<Vec<_>>().join("+");

    let (sequences, param_sets) = match fusion.mode {
        FusionMode::Shared => (
            active.iter().flat_map(|&m| slabs_of(m)).map(|s| seq(vec![s], 0)).collect(),
            vec!["shared".to_string()],
        ),
        FusionMode::Monotemp => (
            active.iter().enumerate().flat_map(|(k, &m)| slabs_of(m).map(move |s| (s, k))).map(|(s, k)| seq(vec![s], k)).collect(),
            active.iter().map(|&m| dataset.modalities[m].name.clone()).collect(),
        ),
        FusionMode::Mod => (
            active.iter().enumerate().map(|(k, &m)| seq(slabs_of(m).collect(), k)).collect(),
            active.iter().map(|&m| dataset.modalities[m].name.clone()).collect(),
        ),
        FusionMode::Group | FusionMode::InterGroup => {
            let groups = dataset.active_groups();
            (
                groups.iter().enumerate().map(|(k, g)| seq(g.iter().flat_map(|&m| slabs_of(m)).collect(), k)).collect(),
                groups.iter().map(|g| names(g)).collect(),
            )
        }
    };
    let fusion_boundary = (fusion.mode == FusionMode::InterGroup)
        .then(|| dims.encoder_depth.saturating_sub(dims.fusion_blocks));
    Ok(RoutingPlan { mode: fusion.mode, sequences, param_sets, fusion_boundary, slab_sizes })
}
