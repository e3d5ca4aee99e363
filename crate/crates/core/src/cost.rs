//! Analytic multiply-accumulate accounting for pretraining and transfer.
//!
//! Sequence lengths come from the routing plan, so every fusion mode is
//! covered: per-sequence encoder and decoder terms, plus a shared fusion
//! stack over the concatenated groups in inter-group mode.

use serde::Serialize;

use crate::config::{token_counts, DatasetSpec, FusionConfig, ModelDims, Task};
use crate::error::{Error, Result};
use crate::masking::nint;
use crate::router::{build_routing, RoutingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CostPhase {
    Pretrain,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub phase: CostPhase,
    pub encoder: u64,
    pub decoder: u64,
    pub enc_to_dec: u64,
    pub patchify: u64,
    pub unpatchify: u64,
    pub attn_pool: u64,
    pub projection: u64,
}

impl CostReport {
    pub fn terms(&self) -> [(&'static str, u64); 7] {
        [
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("enc_to_dec", self.enc_to_dec),
            ("patchify", self.patchify),
            ("unpatchify", self.unpatchify),
            ("attn_pool", self.attn_pool),
            ("projection", self.projection),
        ]
    }

    pub fn macs(&self) -> u64 {
        self.terms().iter().map(|t| t.1).sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["macs"] = self.macs().into();
        v["flops"] = self.flops().into();
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,macs,flops\n");
        for (name, m) in self.terms() {
            s.push_str(&format!("{name},{m},{}\n", 2 * m));
        }
        s.push_str(&format!("total,{},{}\n", self.macs(), self.flops()));
        s
    }
}

/// Multiplies of one transformer block over `l` tokens of width `c`.
pub fn block_macs(l: u64, c: u64) -> u64 {
    12 * l * c * c + 2 * l * l * c
}

/// Encoder multiplies for the given per-sequence token counts. In
/// inter-group mode the last `depth - boundary` blocks run once over all
/// sequences concatenated.
pub fn encoder_macs(lengths: &[usize], dims: &ModelDims, fusion_boundary: Option<usize>) -> u64 {
    let c = dims.encoder_width as u64;
    let depth = dims.encoder_depth as u64;
    match fusion_boundary {
        None => lengths.iter().map(|&l| block_macs(l as u64, c)).sum::<u64>() * depth,
        Some(b) => {
            let b = b as u64;
            let per = lengths.iter().map(|&l| block_macs(l as u64, c)).sum::<u64>() * b;
            let total: u64 = lengths.iter().map(|&l| l as u64).sum();
            per + block_macs(total, c) * (depth - b)
        }
    }
}

pub fn decoder_macs(lengths: &[usize], dims: &ModelDims) -> u64 {
    let c = dims.decoder_width as u64;
    lengths.iter().map(|&l| block_macs(l as u64, c)).sum::<u64>() * dims.decoder_depth as u64
}

fn pixel_terms(dataset: &DatasetSpec) -> u64 {
    dataset
        .active_modalities()
        .map(|(_, m)| (m.image_size * m.image_size * m.temporal_bins * m.channels) as u64)
        .sum()
}

fn routing(dataset: &DatasetSpec, fusion: &FusionConfig, dims: &ModelDims) -> Result<RoutingPlan> {
    let total: usize = dataset.active_modalities().map(|(_, m)| token_counts(m, fusion.multispectral).sequence_length).sum();
    if total == 0 {
        return Err(Error::EmptyModel);
    }
    build_routing(dataset, fusion, dims)
}

pub fn pretrain_cost(dataset: &DatasetSpec, fusion: &FusionConfig, dims: &ModelDims) -> Result<CostReport> {
    let plan = routing(dataset, fusion, dims)?;
    let lengths = plan.sequence_lengths();
    let visible: Vec<usize> = lengths.iter().map(|&l| nint((1.0 - fusion.mask_ratio) * l as f64)).collect();
    let (ce, cd) = (dims.encoder_width as u64, dims.decoder_width as u64);
    let pixels = pixel_terms(dataset);
    Ok(CostReport {
        phase: CostPhase::Pretrain,
        encoder: encoder_macs(&visible, dims, plan.fusion_boundary),
        decoder: decoder_macs(&lengths, dims),
        enc_to_dec: visible.iter().map(|&v| v as u64).sum::<u64>() * ce * cd,
        patchify: pixels * ce,
        unpatchify: pixels * cd,
        attn_pool: 0,
        projection: 0,
    })
}

/// Probing / fine-tuning forward cost: full-length encoder, attentive
/// pooling, the task projection and the patch embedding.
pub fn transfer_cost(dataset: &DatasetSpec, fusion: &FusionConfig, dims: &ModelDims) -> Result<CostReport> {
    let plan = routing(dataset, fusion, dims)?;
    let lengths = plan.sequence_lengths();
    let ce = dims.encoder_width as u64;
    let classes = dataset.num_classes as u64;
    let projection = match dataset.task {
        Task::Classification => ce * classes,
        Task::Segmentation => {
            let side = dataset
                .reference_side()
                .ok_or_else(|| Error::invalid("reference grid does not divide the crop"))? as u64;
            side * side * ce * classes
        }
    };
    Ok(CostReport {
        phase: CostPhase::Transfer,
        encoder: encoder_macs(&lengths, dims, plan.fusion_boundary),
        decoder: 0,
        enc_to_dec: 0,
        patchify: pixel_terms(dataset) * ce,
        unpatchify: 0,
        attn_pool: 2 * lengths.iter().map(|&l| l as u64).sum::<u64>() * ce,
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_formula() {
        assert_eq!(block_macs(1, 1), 14);
        assert_eq!(block_macs(2, 3), 12 * 2 * 9 + 2 * 4 * 3);
    }

    #[test]
    fn inter_group_fusion_stage_uses_concatenation() {
        let dims = ModelDims { encoder_width: 4, encoder_depth: 3, decoder_width: 4, decoder_depth: 1, heads: 1, fusion_blocks: 1 };
        let separate = encoder_macs(&[2, 3], &dims, None);
        let fused = encoder_macs(&[2, 3], &dims, Some(2));
        let expected = (block_macs(2, 4) + block_macs(3, 4)) * 2 + block_macs(5, 4);
        assert_eq!(fused, expected);
        assert!(fused > separate);
    }
}
