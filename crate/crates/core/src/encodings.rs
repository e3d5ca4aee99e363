//! Spatial and temporal encodings.
//!
//! Spatial encodings are the usual 2-D sine-cosine table, built once on a
//! grid whose side is the LCM of all token grids, then block-averaged down to
//! each modality's grid. The last eight dimensions carry temporal features.

use ndarray::Array2;

use crate::config::{lcm_token_grid, ModalitySpec, TEMPORAL_DIMS};
use crate::error::{Error, Result};
use crate::temporal::TimeStamp;

const DAYS_PER_YEAR: f64 = 365.25;

/// `[side², dim]` sine-cosine table. The first half of the columns encodes
/// the row coordinate and the second half the column coordinate; each half
/// is `[sin(pos·ω_i)…, cos(pos·ω_i)…]` with `ω_i = 10000^(-i / (dim/4))`.
pub fn sincos_2d(side: usize, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::invalid(format!("spatial encoding width {dim} is not a positive multiple of 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    Ok(Array2::from_shape_fn((side * side, dim), |(p, j)| {
        let half = j / (2 * quarter);
        let coord = if half == 0 { p / side } else { p % side } as f64;
        let k = j % (2 * quarter);
        if k < quarter {
            (coord * omega[k]).sin()
        } else {
            (coord * omega[k - quarter]).cos()
        }
    }))
}

/// Averages `(lcm/grid)²` blocks of a table built on the `lcm` grid.
pub fn block_average(table: &Array2<f64>, lcm: usize, grid: usize) -> Result<Array2<f64>> {
    if grid == 0 || lcm % grid != 0 {
        return Err(Error::invalid(format!("grid {grid} does not divide reference grid {lcm}")));
    }
    let b = lcm / grid;
    let dim = table.ncols();
    let mut out = Array2::zeros((grid * grid, dim));
    let inv = 1.0 / (b * b) as f64;
    for r in 0..grid {
        for c in 0..grid {
            let mut row = out.row_mut(r * grid + c);
            for i in 0..b {
                for j in 0..b {
                    row.scaled_add(inv, &table.row((r * b + i) * lcm + c * b + j));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    pub lcm_side: usize,
    /// One `[positions, width - 8]` table per modality, `None` when inactive.
    pub tables: Vec<Option<Array2<f64>>>,
}

/// Spatial tables for every active modality at token width `width`.
pub fn spatial_table(specs: &[ModalitySpec], width: usize) -> Result<PositionalTable> {
    if width <= TEMPORAL_DIMS {
        return Err(Error::invalid(format!("token width {width} leaves no room for spatial encodings")));
    }
    let lcm = lcm_token_grid(specs.iter().filter(|m| m.is_active()))?;
    let full = sincos_2d(lcm, width - TEMPORAL_DIMS)?;
    let tables = specs
        .iter()
        .map(|m| if m.is_active() { block_average(&full, lcm, m.grid_side()).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    Ok(PositionalTable { lcm_side: lcm, tables })
}

/// Day-of-year phase, hour-of-day phase, then the signed distance in years
/// to the reference date repeated four times.
pub fn temporal_features(t: &TimeStamp, reference_day: i64) -> [f64; TEMPORAL_DIMS] {
    let day = std::f64::consts::TAU * t.day_of_year / DAYS_PER_YEAR;
    let hour = std::f64::consts::TAU * t.hour / 24.0;
    let delta = (t.absolute_day - reference_day) as f64 / DAYS_PER_YEAR;
    [day.sin(), day.cos(), hour.sin(), hour.cos(), delta, delta, delta, delta]
}

/// Median absolute day of all selected steps; the lower middle element for
/// even counts.
pub fn reference_day<'a>(times: impl IntoIterator<Item = &'a TimeStamp>) -> Option<i64> {
    let mut days: Vec<i64> = times.into_iter().map(|t| t.absolute_day).collect();
    if days.is_empty() {
        return None;
    }
    days.sort_unstable();
    Some(days[(days.len() - 1) / 2])
}

/// Additive encodings of one modality's tokens in `(bin, position, group)`
/// order: `[spatial row ‖ temporal features]`, row-major.
pub fn modality_encoding(
    spatial: &Array2<f64>,
    times: &[TimeStamp],
    reference_day: i64,
    tokens_per_slot: usize,
) -> Vec<f64> {
    let (npos, sdim) = spatial.dim();
    let width = sdim + TEMPORAL_DIMS;
    let mut out = Vec::with_capacity(times.len() * npos * tokens_per_slot * width);
    for t in times {
        let tf = temporal_features(t, reference_day);
        for p in 0..npos {
            for _ in 0..tokens_per_slot {
                out.extend(spatial.row(p).iter());
                out.extend_from_slice(&tf);
            }
        }
    }
    out
}

/// Adds encodings elementwise onto `[L, C]` tokens.
pub fn attach(tokens: &mut Array2<f64>, encoding: &[f64]) -> Result<()> {
    if tokens.len() != encoding.len() {
        return Err(Error::shape(format!("{} encodings for {} token values", encoding.len(), tokens.len())));
    }
    tokens.iter_mut().zip(encoding).for_each(|(t, e)| *t += e);
    Ok(())
}

/// FNV-1a over the little-endian bytes of every value.
pub fn checksum(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
