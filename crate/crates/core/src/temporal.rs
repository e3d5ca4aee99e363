//! Per-modality preprocessing: crop sampling, random truncation, temporal
//! binning, time-step selection within bins, and synchronized D4
//! augmentation.

use std::ops::Range;

use ndarray::{s, Array, Array3, Array4, ArrayBase, ArrayView3, ArrayView4, Axis, Data, Dimension};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{to_mm, DatasetSpec, ModalitySpec};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngKey};

/// Acquisition time of one raw time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub absolute_day: i64,
    pub day_of_year: f64,
    pub hour: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// `[T, C, H, W]`
    pub data: Array4<f32>,
    pub times: Vec<TimeStamp>,
    /// `[T, H, W]` cloud/snow probabilities.
    pub cloud_mask: Option<Array3<f32>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSeries {
    /// `[D, C, I, I]`, already divided by the modality normalization factor.
    pub data: Array4<f32>,
    pub selected_times: Vec<TimeStamp>,
    pub selected_indices: Vec<usize>,
    /// Bin index ranges into the raw series.
    pub bin_boundaries: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// Contiguous range of `bins * floor(len / bins)` steps. Training draws the
/// offset uniformly; evaluation takes the centered range.
pub fn truncate_series<R: Rng + ?Sized>(
    len: usize,
    bins: usize,
    rng: Option<&mut R>,
) -> Result<Range<usize>> {
    if bins == 0 || len < bins {
        return Err(Error::SeriesTooShort { len, bins });
    }
    let kept = bins * (len / bins);
    let slack = len - kept;
    let offset = match rng {
        Some(rng) => rng.gen_range(0..=slack),
        None => slack / 2,
    };
    Ok(offset..offset + kept)
}

/// Splits `0..len` into `bins` equal contiguous ranges.
pub fn bin_series(len: usize, bins: usize) -> Result<Vec<Range<usize>>> {
    if bins == 0 || len % bins != 0 {
        return Err(Error::invalid(format!("{bins} bins do not divide a range of {len}")));
    }
    let w = len / bins;
    Ok((0..bins).map(|b| b * w..(b + 1) * w).collect())
}

/// Steps of `bin` whose cloud mask never exceeds `threshold`; every step of
/// the bin when none qualifies or no mask is given.
pub fn valid_steps(bin: Range<usize>, cloud: Option<ArrayView3<f32>>, threshold: f64) -> Vec<usize> {
    let all: Vec<usize> = bin.clone().collect();
    let Some(mask) = cloud else { return all };
    let valid: Vec<usize> = bin
        .filter(|&t| mask.index_axis(Axis(0), t).iter().all(|&p| f64::from(p) <= threshold))
        .collect();
    if valid.is_empty() {
        all
    } else {
        valid
    }
}

pub fn select_train<R: Rng + ?Sized>(
    bin: Range<usize>,
    cloud: Option<ArrayView3<f32>>,
    threshold: f64,
    rng: &mut R,
) -> Result<usize> {
    if bin.is_empty() {
        return Err(Error::invalid("empty temporal bin"));
    }
    let candidates = valid_steps(bin, cloud, threshold);
    Ok(*candidates.choose(rng).expect("non-empty"))
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Most representative step of a bin: smallest mean absolute deviation to
/// the pixel-wise median of the valid steps. Ties go to the lowest index.
pub fn select_eval(
    data: ArrayView4<f32>,
    bin: Range<usize>,
    cloud: Option<ArrayView3<f32>>,
    threshold: f64,
) -> Result<usize> {
    if bin.is_empty() {
        return Err(Error::invalid("empty temporal bin"));
    }
    let candidates = valid_steps(bin, cloud, threshold);
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let steps: Vec<Vec<f32>> = candidates
        .iter()
        .map(|&t| data.index_axis(Axis(0), t).iter().copied().collect())
        .collect();
    let n = steps[0].len();
    let mut column = vec![0.0f32; steps.len()];
    let med: Vec<f32> = (0..n)
        .map(|i| {
            for (dst, s) in column.iter_mut().zip(&steps) {
                *dst = s[i];
            }
            median(&mut column)
        })
        .collect();
    let mut best = (f64::INFINITY, candidates[0]);
    for (s, &t) in steps.iter().zip(&candidates) {
        let mad = s.iter().zip(&med).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / n as f64;
        if mad < best.0 {
            best = (mad, t);
        }
    }
    Ok(best.1)
}

/// Crop footprint in tile-local millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CropWindow {
    pub row_mm: i64,
    pub col_mm: i64,
    pub extent_mm: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PixelWindow {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

fn lcm_i64(a: i64, b: i64) -> i64 {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Offset step that keeps crop boundaries on integer pixels of every active
/// modality.
fn alignment_step_mm(dataset: &DatasetSpec) -> i64 {
    dataset.active_modalities().map(|(_, m)| to_mm(m.gsd_m)).fold(1, lcm_i64)
}

/// Training: a uniformly drawn aligned window. Evaluation: window
/// `repetition % n²` of the row-major non-overlapping partition.
pub fn sample_crop<R: Rng + ?Sized>(
    dataset: &DatasetSpec,
    phase: Phase,
    repetition: usize,
    rng: &mut R,
) -> CropWindow {
    let tile = to_mm(dataset.tile_extent_m);
    let crop = to_mm(dataset.crop_extent_m);
    if crop >= tile {
        return CropWindow { row_mm: 0, col_mm: 0, extent_mm: tile };
    }
    match phase {
        Phase::Train => {
            let step = alignment_step_mm(dataset);
            let positions = (tile - crop) / step;
            let row = rng.gen_range(0..=positions) * step;
            let col = rng.gen_range(0..=positions) * step;
            CropWindow { row_mm: row, col_mm: col, extent_mm: crop }
        }
        Phase::Eval => {
            let per_axis = (tile / crop) as usize;
            let k = repetition % (per_axis * per_axis);
            CropWindow {
                row_mm: (k / per_axis) as i64 * crop,
                col_mm: (k % per_axis) as i64 * crop,
                extent_mm: crop,
            }
        }
    }
}

pub fn pixel_window(crop: &CropWindow, m: &ModalitySpec) -> PixelWindow {
    let gsd = to_mm(m.gsd_m);
    PixelWindow {
        row: (crop.row_mm / gsd) as usize,
        col: (crop.col_mm / gsd) as usize,
        size: (crop.extent_mm / gsd) as usize,
    }
}

/// Nearest-neighbour resampling of the last two axes to `out x out`.
pub fn resize_nearest(data: ArrayView4<f32>, out: usize) -> Array4<f32> {
    let (t, c, h, w) = data.dim();
    if h == out && w == out {
        return data.to_owned();
    }
    Array4::from_shape_fn((t, c, out, out), |(a, b, i, j)| data[[a, b, i * h / out, j * w / out]])
}

/// Full per-modality pipeline on one crop: truncate, bin, select, resample
/// and scale.
pub fn discretize(
    raw: &RawSeries,
    spec: &ModalitySpec,
    window: PixelWindow,
    phase: Phase,
    key: RngKey,
) -> Result<DiscretizedSeries> {
    let bins = spec.temporal_bins;
    let mut rng_trunc = key.with_purpose(Purpose::Truncate).rng();
    let mut rng_sel = key.with_purpose(Purpose::Select).rng();
    let range = match phase {
        Phase::Train => truncate_series(raw.len(), bins, Some(&mut rng_trunc))?,
        Phase::Eval => truncate_series::<rand_chacha::ChaCha8Rng>(raw.len(), bins, None)?,
    };
    let (_, _, h, w) = raw.data.dim();
    if window.row + window.size > h || window.col + window.size > w {
        return Err(Error::shape(format!(
            "crop window {window:?} outside {h}x{w} raster of `{}`",
            spec.name
        )));
    }
    let rows = window.row..window.row + window.size;
    let cols = window.col..window.col + window.size;
    let cropped = raw.data.slice(s![.., .., rows.clone(), cols.clone()]);
    let cloud = if spec.cloud_mask.enabled {
        raw.cloud_mask.as_ref().map(|m| m.slice(s![.., rows, cols]))
    } else {
        None
    };
    let threshold = spec.cloud_mask.threshold;
    let boundaries: Vec<Range<usize>> = bin_series(range.len(), bins)?
        .into_iter()
        .map(|b| b.start + range.start..b.end + range.start)
        .collect();
    let mut selected = Vec::with_capacity(bins);
    for b in &boundaries {
        let t = match phase {
            Phase::Train => select_train(b.clone(), cloud.clone(), threshold, &mut rng_sel)?,
            Phase::Eval => select_eval(cropped.view(), b.clone(), cloud.clone(), threshold)?,
        };
        selected.push(t);
    }
    let picked = cropped.select(Axis(0), &selected);
    let mut data = resize_nearest(picked.view(), spec.image_size);
    let scale = 1.0 / spec.norm_factor as f32;
    data.mapv_inplace(|v| v * scale);
    Ok(DiscretizedSeries {
        data,
        selected_times: selected.iter().map(|&t| raw.times[t]).collect(),
        selected_indices: selected,
        bin_boundaries: boundaries,
    })
}

/// Applies element `k` (0..8) of the dihedral group to the last two axes:
/// an optional horizontal flip (`k >= 4`) followed by `k % 4`
/// counter-clockwise quarter turns.
pub fn d4_transform<A, S, D>(a: &ArrayBase<S, D>, k: usize) -> Array<A, D>
where
    A: Clone,
    S: Data<Elem = A>,
    D: Dimension,
{
    let nd = a.ndim();
    assert!(nd >= 2, "d4_transform needs at least two axes");
    let (h, w) = (Axis(nd - 2), Axis(nd - 1));
    let mut v = a.view();
    if k % 8 >= 4 {
        v.invert_axis(w);
    }
    for _ in 0..k % 4 {
        v.swap_axes(h.index(), w.index());
        v.invert_axis(h);
    }
    v.as_standard_layout().into_owned()
}

/// Inverse element index.
pub fn d4_inverse(k: usize) -> usize {
    let k = k % 8;
    if k >= 4 {
        k
    } else {
        (4 - k) % 4
    }
}
