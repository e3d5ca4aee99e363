//! Synthetic multimodal datasets and the on-disk tile layout.
//!
//! Each tile carries a latent class map on the reference grid. A pixel of
//! class `k` in band group `g` at time `t` renders as
//! `(signature[k][c] + phenology_k(doy_t)) · gain_g · (1 + δgain) + offset_g
//! + δoffset + noise`, multiplied by the modality normalization factor. The
//! `δ` nuisance terms are drawn per `(patch, time, group)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{to_mm, DatasetSpec, ModalitySpec, Task};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngKey};
use crate::temporal::{RawSeries, TimeStamp};
use crate::tilefile::{read_f32, read_u16, write_tensor, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentLayout {
    /// One class per tile.
    Tile,
    /// Voronoi cells around a few random seeds.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenology {
    pub amplitude: f64,
    /// Cycles per year, one per class.
    pub frequencies: Vec<f64>,
    /// Draw a uniform phase per tile.
    #[serde(default)]
    pub random_phase: bool,
    /// Draw a random sign per tile.
    #[serde(default)]
    pub random_sign: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainOffset {
    pub gain: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    pub seed: u64,
    pub num_tiles: usize,
    pub num_classes: usize,
    pub latent: LatentLayout,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    /// Spread of per-class channel means around 1.
    pub signature_spread: f64,
    /// Amplitude of the zero-mean per-class shape inside every band group.
    #[serde(default)]
    pub shape_amplitude: f64,
    pub phenology: Option<Phenology>,
    /// Per modality, one entry per band group; missing means `(1, 0)`.
    #[serde(default)]
    pub group_levels: BTreeMap<String, Vec<GainOffset>>,
    /// Relative gain jitter per `(patch, time, group)`.
    #[serde(default)]
    pub gain_jitter: f64,
    /// Amplitude of a smooth class-independent spatial texture, constant
    /// over time.
    #[serde(default)]
    pub texture_amplitude: f64,
    /// Wavelength range of the texture's plane waves, in meters.
    #[serde(default = "default_wavelengths")]
    pub texture_wavelength_m: [f64; 2],
    /// Offset jitter per `(patch, time, group)`, in units of the group gain.
    #[serde(default)]
    pub offset_jitter: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub cloud_probability: f64,
    /// Raw series length per modality; defaults to three steps per bin.
    #[serde(default)]
    pub raw_steps: BTreeMap<String, usize>,
    #[serde(default)]
    pub start_day: i64,
}

fn default_blobs() -> usize {
    4
}

fn default_wavelengths() -> [f64; 2] {
    [6.0, 16.0]
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a recipe needs at least two classes"));
        }
        if self.num_tiles == 0 {
            return Err(Error::invalid("a recipe needs at least one tile"));
        }
        if let Some(p) = &self.phenology {
            if p.frequencies.len() != self.num_classes {
                return Err(Error::invalid("phenology needs one frequency per class"));
            }
        }
        let phen_distinct = self.phenology.as_ref().is_some_and(|p| {
            p.amplitude != 0.0 && p.frequencies.iter().enumerate().all(|(i, a)| p.frequencies[..i].iter().all(|b| b != a))
        });
        if self.signature_spread == 0.0 && self.shape_amplitude == 0.0 && !phen_distinct {
            return Err(Error::invalid("classes are indistinguishable: no signature, shape or phenology differences"));
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) {
            return Err(Error::invalid("cloud probability must lie in [0, 1]"));
        }
        Ok(())
    }

    fn steps(&self, m: &ModalitySpec) -> usize {
        self.raw_steps.get(&m.name).copied().unwrap_or(3 * m.temporal_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub data: String,
    pub times: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
    /// `[T, C, H, W]`
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: String,
    pub modalities: BTreeMap<String, ModalityEntry>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<SyntheticRecipe>,
    /// Side of segmentation label grids over the whole tile.
    pub label_side: usize,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Classes(Vec<usize>),
    Map(Array2<u16>),
}

/// Label resolution: the finest active modality.
pub fn label_side(dataset: &DatasetSpec) -> Result<usize> {
    dataset
        .active_modalities()
        .filter_map(|(_, m)| dataset.tile_pixels(m))
        .max()
        .ok_or_else(|| Error::invalid("no active modality covers the tile with whole pixels"))
}

fn latent_map<R: Rng>(recipe: &SyntheticRecipe, side: usize, rng: &mut R) -> Array2<usize> {
    match recipe.latent {
        LatentLayout::Tile => Array2::from_elem((side, side), rng.gen_range(0..recipe.num_classes)),
        LatentLayout::Blobs => {
            let seeds: Vec<(f64, f64, usize)> = (0..recipe.blobs.max(1))
                .map(|_| (rng.gen::<f64>() * side as f64, rng.gen::<f64>() * side as f64, rng.gen_range(0..recipe.num_classes)))
                .collect();
            Array2::from_shape_fn((side, side), |(r, c)| {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                seeds
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                        let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one seed")
                    .2
            })
        }
    }
}

/// Per class, modality and channel: the mean reflectance-like value.
pub fn signatures(recipe: &SyntheticRecipe, dataset: &DatasetSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = RngKey::new(recipe.seed, 0, u64::MAX, Purpose::Generate).rng();
    (0..recipe.num_classes)
        .map(|_| {
            dataset
                .modalities
                .iter()
                .map(|m| {
                    let mut sig: Vec<f64> =
                        (0..m.channels).map(|_| 1.0 + recipe.signature_spread * rng.gen_range(-1.0..1.0)).collect();
                    for g in &m.band_groups {
                        let raw: Vec<f64> = g.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
                        for (&c, v) in g.iter().zip(raw) {
                            sig[c] += recipe.shape_amplitude * (v - mean);
                        }
                    }
                    sig
                })
                .collect()
        })
        .collect()
}

struct RenderedTile {
    series: Vec<Option<RawSeries>>,
    label: Label,
}

fn acquisition_times<R: Rng>(start: i64, steps: usize, rng: &mut R) -> Vec<TimeStamp> {
    (0..steps)
        .map(|s| {
            let abs = start + (s * 365 / steps.max(1)) as i64 + rng.gen_range(0..3);
            TimeStamp { absolute_day: abs, day_of_year: abs.rem_euclid(365) as f64 + 1.0, hour: 10.0 + rng.gen_range(0.0..2.0) }
        })
        .collect()
}

fn render_tile(recipe: &SyntheticRecipe, dataset: &DatasetSpec, sigs: &[Vec<Vec<f64>>], tile: usize) -> Result<RenderedTile> {
    let key = RngKey::new(recipe.seed, 0, tile as u64, Purpose::Generate);
    let mut rng = key.rng();
    let tile_mm = to_mm(dataset.tile_extent_m);
    let ref_mm = to_mm(dataset.reference_grid_resolution_m);
    let latent_side = (tile_mm / ref_mm).max(1) as usize;
    let latent = latent_map(recipe, latent_side, &mut rng);
    let (phase, sign) = match &recipe.phenology {
        Some(p) => (
            if p.random_phase { rng.gen_range(0.0..std::f64::consts::TAU) } else { 0.0 },
            if p.random_sign && rng.gen_bool(0.5) { -1.0 } else { 1.0 },
        ),
        None => (0.0, 1.0),
    };
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / rng.gen_range(recipe.texture_wavelength_m[0]..recipe.texture_wavelength_m[1]);
            [k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0)]
        })
        .collect();
    let texture = |gsd_mm: i64, r: usize, c: usize| {
        let (y, x) = ((r as f64 + 0.5) * gsd_mm as f64 / 1000.0, (c as f64 + 0.5) * gsd_mm as f64 / 1000.0);
        recipe.texture_amplitude * waves.iter().map(|w| w[3] * (w[0] * x + w[1] * y + w[2]).sin()).sum::<f64>() / 3f64.sqrt()
    };
    let noise = Normal::new(0.0, recipe.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let class_at = |gsd_mm: i64, r: usize, c: usize| {
        let y = ((r as i64 * gsd_mm) / ref_mm) as usize;
        let x = ((c as i64 * gsd_mm) / ref_mm) as usize;
        latent[[y.min(latent_side - 1), x.min(latent_side - 1)]]
    };
    let mut series = Vec::with_capacity(dataset.modalities.len());
    for (mi, m) in dataset.modalities.iter().enumerate() {
        if !m.is_active() {
            series.push(None);
            continue;
        }
        let mut mrng = key.rng_sub(1 + mi as u64);
        let side = dataset
            .tile_pixels(m)
            .ok_or_else(|| Error::invalid(format!("tile does not cover whole pixels of `{}`", m.name)))?;
        let steps = recipe.steps(m);
        let times = acquisition_times(recipe.start_day, steps, &mut mrng);
        let levels = recipe.group_levels.get(&m.name);
        let group_of: Vec<usize> = {
            let mut g = vec![0; m.channels];
            for (gi, chans) in m.band_groups.iter().enumerate() {
                for &c in chans {
                    g[c] = gi;
                }
            }
            g
        };
        let p = m.patch_size.max(1);
        let blocks = side.div_ceil(p);
        let ng = m.num_groups();
        let mut jitter = Array4::<f64>::zeros((steps, blocks * blocks, ng, 2));
        for v in jitter.iter_mut() {
            *v = mrng.gen_range(-1.0..1.0);
        }
        let gsd_mm = to_mm(m.gsd_m);
        let classes = Array2::from_shape_fn((side, side), |(r, c)| class_at(gsd_mm, r, c));
        let tex = Array2::from_shape_fn((side, side), |(r, c)| texture(gsd_mm, r, c));
        let mut data = Array4::<f32>::zeros((steps, m.channels, side, side));
        let mut cloud = m.cloud_mask.enabled.then(|| Array3::<f32>::zeros((steps, side, side)));
        for (t, ts) in times.iter().enumerate() {
            let phen: Vec<f64> = (0..recipe.num_classes)
                .map(|k| match &recipe.phenology {
                    Some(ph) => sign * ph.amplitude * (std::f64::consts::TAU * ph.frequencies[k] * ts.day_of_year / 365.25 + phase).sin(),
                    None => 0.0,
                })
                .collect();
            let cloudy = cloud.is_some() && mrng.gen_bool(recipe.cloud_probability);
            for c in 0..m.channels {
                let g = group_of[c];
                let lv = levels.and_then(|l| l.get(g)).copied().unwrap_or(GainOffset { gain: 1.0, offset: 0.0 });
                for r in 0..side {
                    for q in 0..side {
                        let k = classes[[r, q]];
                        let b = (r / p) * blocks + q / p;
                        let gain = lv.gain * (1.0 + recipe.gain_jitter * jitter[[t, b, g, 0]]);
                        let offset = lv.offset + recipe.offset_jitter * lv.gain * jitter[[t, b, g, 1]];
                        let v = (sigs[k][mi][c] + phen[k] + tex[[r, q]]) * gain + offset + lv.gain * noise.sample(&mut mrng);
                        data[[t, c, r, q]] = (v * m.norm_factor) as f32;
                    }
                }
            }
            if cloudy {
                let half = side.div_ceil(2);
                let (r0, c0) = (mrng.gen_range(0..=side - half), mrng.gen_range(0..=side - half));
                let cm = cloud.as_mut().expect("cloudy implies mask");
                for r in r0..r0 + half {
                    for q in c0..c0 + half {
                        cm[[t, r, q]] = 1.0;
                        for c in 0..m.channels {
                            data[[t, c, r, q]] += (3.0 * m.norm_factor) as f32;
                        }
                    }
                }
            }
        }
        series.push(Some(RawSeries { data, times, cloud_mask: cloud }));
    }
    let label = match dataset.task {
        Task::Classification => {
            let mut present: Vec<usize> = latent.iter().copied().collect();
            present.sort_unstable();
            present.dedup();
            Label::Classes(present)
        }
        Task::Segmentation => {
            let side = label_side(dataset)?;
            let gsd_mm = tile_mm / side as i64;
            Label::Map(Array2::from_shape_fn((side, side), |(r, c)| class_at(gsd_mm, r, c) as u16))
        }
    };
    Ok(RenderedTile { series, label })
}

fn json_write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn json_read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

/// Writes one tile's files and returns its manifest entry.
pub fn write_tile(
    out_dir: &Path,
    id: &str,
    dataset: &DatasetSpec,
    series: &[Option<RawSeries>],
    label: &Label,
) -> Result<TileEntry> {
    let mut modalities = BTreeMap::new();
    for (m, s) in dataset.modalities.iter().zip(series) {
        let Some(s) = s else { continue };
        let rel = |suffix: &str| format!("tiles/{id}/{}.{suffix}", m.name);
        let (t, c, h, w) = s.data.dim();
        write_tensor(&out_dir.join(rel("bin")), &Tensor::F32(s.data.clone().into_dyn()))?;
        json_write(&out_dir.join(rel("times.json")), &s.times)?;
        let cloud = match &s.cloud_mask {
            Some(cm) => {
                write_tensor(&out_dir.join(rel("cloud.bin")), &Tensor::F32(cm.clone().into_dyn()))?;
                Some(rel("cloud.bin"))
            }
            None => None,
        };
        modalities.insert(m.name.clone(), ModalityEntry { data: rel("bin"), times: rel("times.json"), cloud, shape: [t, c, h, w] });
    }
    let label = match label {
        Label::Classes(c) => {
            let rel = format!("tiles/{id}/labels.json");
            json_write(&out_dir.join(&rel), c)?;
            rel
        }
        Label::Map(map) => {
            let rel = format!("tiles/{id}/labels.bin");
            write_tensor(&out_dir.join(&rel), &Tensor::U16(map.clone().into_dyn()))?;
            rel
        }
    };
    Ok(TileEntry { id: id.to_string(), modalities, label })
}

pub fn tile_id(index: usize) -> String {
    format!("tile_{index:05}")
}

/// Renders every tile of `recipe` for `dataset` and writes the dataset to
/// `out_dir`.
pub fn generate(recipe: &SyntheticRecipe, dataset: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    recipe.validate()?;
    if recipe.num_classes > dataset.num_classes {
        return Err(Error::invalid(format!(
            "recipe has {} classes but the dataset declares {}",
            recipe.num_classes, dataset.num_classes
        )));
    }
    let sigs = signatures(recipe, dataset);
    let rendered: Vec<RenderedTile> =
        (0..recipe.num_tiles).into_par_iter().map(|i| render_tile(recipe, dataset, &sigs, i)).collect::<Result<_>>()?;
    let mut tiles = Vec::with_capacity(rendered.len());
    for (i, r) in rendered.iter().enumerate() {
        tiles.push(write_tile(out_dir, &tile_id(i), dataset, &r.series, &r.label)?);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset: dataset.clone(),
        recipe: Some(recipe.clone()),
        label_side: label_side(dataset)?,
        tiles,
    };
    json_write(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// In-memory rendering, same content as [`generate`] without touching disk.
pub fn render(recipe: &SyntheticRecipe, dataset: &DatasetSpec) -> Result<Vec<(Vec<Option<RawSeries>>, Label)>> {
    recipe.validate()?;
    let sigs = signatures(recipe, dataset);
    (0..recipe.num_tiles)
        .into_par_iter()
        .map(|i| render_tile(recipe, dataset, &sigs, i).map(|r| (r.series, r.label)))
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = json_read(&dir.join("manifest.json"))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion { path: dir.join("manifest.json"), version: m.version as u16 });
    }
    Ok(m)
}

pub fn read_tile(manifest: &Manifest, root: &Path, tile_id: &str, modality: &str) -> Result<RawSeries> {
    let tile = manifest
        .tiles
        .iter()
        .find(|t| t.id == tile_id)
        .ok_or_else(|| Error::invalid(format!("tile `{tile_id}` not in manifest")))?;
    let entry = tile
        .modalities
        .get(modality)
        .ok_or_else(|| Error::invalid(format!("tile `{tile_id}` has no modality `{modality}`")))?;
    let spec = manifest
        .dataset
        .modalities
        .iter()
        .find(|m| m.name == modality)
        .ok_or_else(|| Error::invalid(format!("modality `{modality}` not in dataset spec")))?;
    let [t, c, h, w] = entry.shape;
    let side = manifest.dataset.tile_pixels(spec);
    if c != spec.channels || Some(h) != side || Some(w) != side {
        return Err(Error::shape(format!(
            "tile `{tile_id}` declares `{modality}` as {:?}, spec wants {} channels at {:?} pixels",
            entry.shape, spec.channels, side
        )));
    }
    let data = read_f32(&root.join(&entry.data), &entry.shape)?
        .into_dimensionality()
        .expect("shape checked");
    let times: Vec<TimeStamp> = json_read(&root.join(&entry.times))?;
    if times.len() != t {
        return Err(Error::shape(format!("{}: {} time stamps for {t} steps", entry.times, times.len())));
    }
    let cloud_mask = match &entry.cloud {
        Some(p) => Some(read_f32(&root.join(p), &[t, h, w])?.into_dimensionality().expect("shape checked")),
        None => None,
    };
    Ok(RawSeries { data, times, cloud_mask })
}

pub fn read_label(manifest: &Manifest, root: &Path, tile: &TileEntry) -> Result<Label> {
    let path: PathBuf = root.join(&tile.label);
    match manifest.dataset.task {
        Task::Classification => Ok(Label::Classes(json_read(&path)?)),
        Task::Segmentation => {
            let s = manifest.label_side;
            let a: ArrayD<u16> = read_u16(&path, &[s, s])?;
            Ok(Label::Map(a.into_dimensionality().expect("shape checked")))
        }
    }
}

pub fn read_recipe(path: &Path) -> Result<SyntheticRecipe> {
    json_read(path)
}


const RECIPES: [(&str, &str); 4] = [
    ("temporal", include_str!("../recipes/temporal.json")),
    ("spectral", include_str!("../recipes/spectral.json")),
    ("segmentation", include_str!("../recipes/segmentation.json")),
    ("toy", include_str!("../recipes/toy.json")),
];

pub fn recipe_names() -> impl Iterator<Item = &'static str> {
    RECIPES.iter().map(|r| r.0)
}

/// A shipped recipe by name.
pub fn builtin_recipe(name: &str) -> Result<SyntheticRecipe> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    let text = RECIPES
        .iter()
        .find(|r| r.0 == name)
        .ok_or_else(|| Error::invalid(format!("unknown recipe `{name}`")))?
        .1;
    serde_json::from_str(text).map_err(|e| Error::invalid(format!("recipe `{name}`: {e}")))
}
