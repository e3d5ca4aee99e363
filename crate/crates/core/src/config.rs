//! Dataset, modality, fusion and model-dimension descriptions.
//!
//! These four types are the single source of truth for token accounting:
//! the router, the model and the cost model all derive sequence lengths from
//! [`token_counts`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CloudMask {
    pub enabled: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Ground sampling distance in meters per pixel.
    pub gsd_m: f64,
    /// Side length of the model input, in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of temporal bins; zero excludes the modality from the run.
    pub temporal_bins: usize,
    pub channels: usize,
    /// Ordered partition of channel indices.
    pub band_groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub band_names: Vec<String>,
    pub norm_factor: f64,
    #[serde(default)]
    pub cloud_mask: CloudMask,
}

impl ModalitySpec {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_positions(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn is_active(&self) -> bool {
        self.temporal_bins > 0
    }

    pub fn num_groups(&self) -> usize {
        self.band_groups.len()
    }

    /// Length of the flattened patch vector, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub tile_extent_m: f64,
    pub crop_extent_m: f64,
    pub modalities: Vec<ModalitySpec>,
    /// Partition of modality names used by the `group` and `inter-group`
    /// fusion modes.
    pub modality_groups: Vec<Vec<String>>,
    pub reference_grid_resolution_m: f64,
    pub task: Task,
    /// Number of classes, ignored ones included.
    pub num_classes: usize,
    #[serde(default)]
    pub ignored_class_ids: Vec<usize>,
}

/// Lengths in integer millimeters. All metric extents in the presets are
/// multiples of 0.1 mm, so this keeps crop arithmetic exact.
pub fn to_mm(meters: f64) -> i64 {
    (meters * 1000.0).round() as i64
}

fn exact_ratio(num_m: f64, den_m: f64) -> Option<usize> {
    let (n, d) = (to_mm(num_m), to_mm(den_m));
    if d <= 0 || n < 0 || n % d != 0 {
        None
    } else {
        Some((n / d) as usize)
    }
}

impl DatasetSpec {
    pub fn active_modalities(&self) -> impl Iterator<Item = (usize, &ModalitySpec)> {
        self.modalities.iter().enumerate().filter(|(_, m)| m.is_active())
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Number of crops per tile per epoch: nearest integer of the area ratio,
    /// at least one.
    pub fn repetition_factor(&self) -> usize {
        let ratio = self.tile_extent_m / self.crop_extent_m;
        ((ratio * ratio).round() as usize).max(1)
    }

    /// Crop side length in pixels of modality `m` at its native GSD.
    pub fn crop_pixels(&self, m: &ModalitySpec) -> Option<usize> {
        exact_ratio(self.crop_extent_m, m.gsd_m)
    }

    pub fn tile_pixels(&self, m: &ModalitySpec) -> Option<usize> {
        exact_ratio(self.tile_extent_m, m.gsd_m)
    }

    /// Side of the segmentation token grid of reference.
    pub fn reference_side(&self) -> Option<usize> {
        exact_ratio(self.crop_extent_m, self.reference_grid_resolution_m)
    }

    /// Modality groups restricted to active modalities, as indices. Groups
    /// that end up empty are dropped.
    pub fn active_groups(&self) -> Vec<Vec<usize>> {
        self.modality_groups
            .iter()
            .map(|g| {
                g.iter()
                    .filter_map(|n| self.modality_index(n))
                    .filter(|&i| self.modalities[i].is_active())
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "shared")]
    Shared,
    #[serde(rename = "monotemp")]
    Monotemp,
    #[serde(rename = "mod")]
    Mod,
    #[serde(rename = "group")]
    Group,
    #[serde(rename = "inter-group")]
    InterGroup,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Shared,
        FusionMode::Monotemp,
        FusionMode::Mod,
        FusionMode::Group,
        FusionMode::InterGroup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Shared => "shared",
            FusionMode::Monotemp => "monotemp",
            FusionMode::Mod => "mod",
            FusionMode::Group => "group",
            FusionMode::InterGroup => "inter-group",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mode `{s}`")))
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Multispectral {
    #[serde(rename = "joint-token")]
    JointToken,
    #[serde(rename = "token-based")]
    TokenBased,
}

impl Multispectral {
    pub fn as_str(self) -> &'static str {
        match self {
            Multispectral::JointToken => "joint-token",
            Multispectral::TokenBased => "token-based",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint-token" => Ok(Multispectral::JointToken),
            "token-based" => Ok(Multispectral::TokenBased),
            _ => Err(Error::invalid(format!("unknown multispectral fusion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetNorm {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "patch")]
    Patch,
    #[serde(rename = "patch-group")]
    PatchGroup,
}

impl TargetNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetNorm::None => "none",
            TargetNorm::Patch => "patch",
            TargetNorm::PatchGroup => "patch-group",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TargetNorm::None),
            "patch" => Ok(TargetNorm::Patch),
            "patch-group" => Ok(TargetNorm::PatchGroup),
            _ => Err(Error::invalid(format!("unknown target normalization `{s}`"))),
        }
    }
}

/// Per-axis probabilities of the structured masking stage. A probability
/// of zero disables that axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredProbs {
    pub modality: f64,
    pub spatial: f64,
    pub temporal: f64,
}

impl Default for StructuredProbs {
    fn default() -> Self {
        Self { modality: 0.25, spatial: 0.25, temporal: 0.25 }
    }
}

impl StructuredProbs {
    pub fn disabled() -> Self {
        Self { modality: 0.0, spatial: 0.0, temporal: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub multispectral: Multispectral,
    pub target_norm: TargetNorm,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub structured_probs: StructuredProbs,
}

fn default_mask_ratio() -> f64 {
    0.75
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Group,
            multispectral: Multispectral::JointToken,
            target_norm: TargetNorm::PatchGroup,
            mask_ratio: 0.75,
            structured_probs: StructuredProbs::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub encoder_width: usize,
    pub encoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    #[serde(default = "default_fusion_blocks")]
    pub fusion_blocks: usize,
}

fn default_fusion_blocks() -> usize {
    3
}

impl ModelDims {
    /// The ViT-B encoder with the 3-block, 512-wide MAE decoder.
    pub fn base() -> Self {
        Self {
            encoder_width: 768,
            encoder_depth: 12,
            decoder_width: 512,
            decoder_depth: 3,
            heads: 16,
            fusion_blocks: 3,
        }
    }
}

/// Number of temporal features concatenated to every token.
pub const TEMPORAL_DIMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub positions: usize,
    pub bins: usize,
    pub sequence_length: usize,
}

/// Positions, bins and sequence length of one modality.
pub fn token_counts(m: &ModalitySpec, multispectral: Multispectral) -> TokenCounts {
    let positions = if m.patch_size == 0 { 0 } else { m.num_positions() };
    let bins = m.temporal_bins;
    let per_slot = match multispectral {
        Multispectral::JointToken => 1,
        Multispectral::TokenBased => m.num_groups(),
    };
    TokenCounts { positions, bins, sequence_length: positions * bins * per_slot }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    if a == 0 || b == 0 {
        0
    } else {
        a / gcd(a, b) * b
    }
}

/// Side of the reference positional-encoding grid: the LCM of the token
/// grid sides of all active modalities.
pub fn lcm_token_grid<'a>(specs: impl IntoIterator<Item = &'a ModalitySpec>) -> Result<usize> {
    let side = specs
        .into_iter()
        .filter(|m| m.is_active())
        .map(ModalitySpec::grid_side)
        .fold(None, |acc: Option<usize>, g| Some(acc.map_or(g, |a| lcm(a, g))));
    side.ok_or_else(|| Error::invalid("no active modality"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }

    pub fn has(&self, message_fragment: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(message_fragment))
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("pass");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

fn validate_modality(r: &mut ValidationReport, path: &str, m: &ModalitySpec) {
    if m.name.is_empty() {
        r.fail(format!("{path}.name"), "empty modality name");
    }
    if !(m.gsd_m > 0.0) {
        r.fail(format!("{path}.gsd_m"), "gsd must be positive");
    }
    if m.patch_size == 0 || m.image_size == 0 {
        r.fail(format!("{path}.patch_size"), "image and patch sizes must be positive");
    } else if m.image_size % m.patch_size != 0 {
        r.fail(format!("{path}.patch_size"), "patch does not divide image");
    }
    if m.channels == 0 {
        r.fail(format!("{path}.channels"), "at least one channel required");
    }
    if !(m.norm_factor > 0.0) {
        r.fail(format!("{path}.norm_factor"), "normalization factor must be positive");
    }
    if !(0.0..=1.0).contains(&m.cloud_mask.threshold) {
        r.fail(format!("{path}.cloud_mask.threshold"), "threshold outside [0, 1]");
    }
    if !m.band_names.is_empty() && m.band_names.len() != m.channels {
        r.fail(format!("{path}.band_names"), "band name count differs from channels");
    }
    let mut seen = vec![false; m.channels];
    for (gi, g) in m.band_groups.iter().enumerate() {
        if g.is_empty() {
            r.fail(format!("{path}.band_groups[{gi}]"), "partition has an empty group");
        }
        for &c in g {
            if c >= m.channels {
                r.fail(format!("{path}.band_groups[{gi}]"), format!("channel {c} out of range"));
            } else if seen[c] {
                r.fail(format!("{path}.band_groups[{gi}]"), format!("partition not disjoint: channel {c}"));
            } else {
                seen[c] = true;
            }
        }
    }
    if m.band_groups.is_empty() || seen.iter().any(|s| !s) {
        r.fail(format!("{path}.band_groups"), "partition not covering");
    }
}

/// Checks every invariant of the configuration triple. A passing report
/// guarantees that routing, tokenization, encodings and the cost model can
/// be constructed.
pub fn validate(dataset: &DatasetSpec, fusion: &FusionConfig, dims: &ModelDims) -> ValidationReport {
    let mut r = ValidationReport::default();

    if !(dataset.tile_extent_m > 0.0 && dataset.crop_extent_m > 0.0) {
        r.fail("dataset.extent", "extents must be positive");
    } else if to_mm(dataset.crop_extent_m) > to_mm(dataset.tile_extent_m) {
        r.fail("dataset.crop_extent_m", "crop larger than tile");
    }
    let mut names = HashSet::new();
    for (i, m) in dataset.modalities.iter().enumerate() {
        let path = format!("dataset.modalities[{i}]");
        validate_modality(&mut r, &path, m);
        if !names.insert(m.name.as_str()) {
            r.fail(format!("{path}.name"), format!("duplicate modality `{}`", m.name));
        }
        if m.gsd_m > 0.0 && dataset.crop_pixels(m).is_none() {
            r.fail(format!("{path}.gsd_m"), "crop does not cover an integer number of pixels");
        }
    }
    if dataset.active_modalities().next().is_none() {
        r.fail("dataset.modalities", "no active modality");
    }

    let mut grouped = HashSet::new();
    for (gi, g) in dataset.modality_groups.iter().enumerate() {
        if g.is_empty() {
            r.fail(format!("dataset.modality_groups[{gi}]"), "empty modality group");
        }
        for n in g {
            if !names.contains(n.as_str()) {
                r.fail(format!("dataset.modality_groups[{gi}]"), format!("unknown modality `{n}`"));
            } else if !grouped.insert(n.as_str()) {
                r.fail(format!("dataset.modality_groups[{gi}]"), format!("modality `{n}` in two groups"));
            }
        }
    }
    if grouped.len() != names.len() {
        r.fail("dataset.modality_groups", "modality groups do not cover all modalities");
    }

    if !(dataset.reference_grid_resolution_m > 0.0) || dataset.reference_side().is_none() {
        r.fail("dataset.reference_grid_resolution_m", "reference grid does not tile the crop");
    }
    if dataset.num_classes == 0 {
        r.fail("dataset.num_classes", "at least one class required");
    }
    for &c in &dataset.ignored_class_ids {
        if c >= dataset.num_classes {
            r.fail("dataset.ignored_class_ids", format!("class {c} out of range"));
        }
    }

    if !(fusion.mask_ratio > 0.0 && fusion.mask_ratio < 1.0) {
        r.fail("fusion.mask_ratio", "mask ratio outside (0, 1)");
    }
    let p = fusion.structured_probs;
    for (name, v) in [("modality", p.modality), ("spatial", p.spatial), ("temporal", p.temporal)] {
        if !(0.0..=1.0).contains(&v) {
            r.fail(format!("fusion.structured_probs.{name}"), "probability outside [0, 1]");
        }
    }

    let heads = dims.heads;
    if dims.encoder_width <= TEMPORAL_DIMS {
        r.fail("dims.encoder_width", "encoder width must exceed 8");
    }
    if dims.decoder_width <= TEMPORAL_DIMS {
        r.fail("dims.decoder_width", "decoder width must exceed 8");
    }
    for (name, w) in [("encoder_width", dims.encoder_width), ("decoder_width", dims.decoder_width)] {
        if heads == 0 || w % heads != 0 {
            r.fail(format!("dims.{name}"), "width not divisible by heads");
        }
        if w > TEMPORAL_DIMS && (w - TEMPORAL_DIMS) % 4 != 0 {
            r.fail(format!("dims.{name}"), "spatial encoding width (width - 8) not divisible by 4");
        }
    }
    if dims.encoder_depth == 0 {
        r.fail("dims.encoder_depth", "encoder needs at least one block");
    }
    if fusion.mode == FusionMode::InterGroup && dims.fusion_blocks > dims.encoder_depth {
        r.fail("dims.fusion_blocks", "more fusion blocks than encoder blocks");
    }
    r
}

/// Optimizer and schedule constants of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseHyper {
    pub base_lr: f64,
    pub final_div: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyper {
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub pretrain: PhaseHyper,
    pub probe: PhaseHyper,
    pub finetune: PhaseHyper,
}

fn default_warmup() -> f64 {
    0.2
}
fn default_wd() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}

/// A complete, serializable run configuration: the shipped presets are
/// files of this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub fusion: FusionConfig,
    pub dims: ModelDims,
    pub training: TrainingHyper,
}

impl ExperimentConfig {
    pub fn validate(&self) -> ValidationReport {
        validate(&self.dataset, &self.fusion, &self.dims)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config parse error: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
