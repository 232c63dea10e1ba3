use serde::{Deserialize, Serialize};

use super::{SitsCube, NDVI, NIR, RED};
use crate::error::{Error, Result};

/// Replaces cloudy observations by linear interpolation in time between the
/// nearest valid acquisitions; outside the valid range the nearest valid
/// value is repeated. The mask becomes all-valid.
pub fn gapfill_linear(cube: &SitsCube) -> Result<SitsCube> {
    let Some(mask) = &cube.validity else {
        return Ok(cube.clone());
    };
    let (t, b, h, w) = (cube.num_timestamps(), cube.num_bands(), cube.height, cube.width);
    let mut data = cube.data.clone();
    let mut valid_steps = Vec::with_capacity(t);
    for row in 0..h {
        for col in 0..w {
            valid_steps.clear();
            valid_steps.extend((0..t).filter(|&s| mask[(s * h + row) * w + col]));
            let (Some(&first), Some(&last)) = (valid_steps.first(), valid_steps.last()) else {
                return Err(Error::NoValidObservation { row, col });
            };
            if valid_steps.len() == t {
                continue;
            }
            for band in 0..b {
                let at = |s: usize| cube.index(s, band, row, col);
                let mut next = 0;
                for s in 0..t {
                    if mask[(s * h + row) * w + col] {
                        next += 1;
                        continue;
                    }
                    data[at(s)] = if s < first {
                        cube.data[at(first)]
                    } else if s > last {
                        cube.data[at(last)]
                    } else {
                        let (lo, hi) = (valid_steps[next - 1], valid_steps[next]);
                        let (t0, t1, ts) = (cube.timestamps[lo], cube.timestamps[hi], cube.timestamps[s]);
                        let (v0, v1) = (cube.data[at(lo)] as f64, cube.data[at(hi)] as f64);
                        (v0 + (v1 - v0) * (ts - t0) as f64 / (t1 - t0) as f64) as f32
                    };
                }
            }
        }
    }
    Ok(SitsCube {
        data,
        validity: None,
        ..cube.clone()
    })
}

/// Appends `(NIR − Red) / (NIR + Red)` as a band; a zero denominator gives 0.
pub fn compute_ndvi(cube: &SitsCube) -> Result<SitsCube> {
    if cube.band_index(NDVI).is_some() {
        return Err(Error::Data("cube already has an NDVI band".into()));
    }
    let red = cube.band_index(RED).ok_or_else(|| Error::MissingBand(RED.into()))?;
    let nir = cube.band_index(NIR).ok_or_else(|| Error::MissingBand(NIR.into()))?;
    let (t, b, plane) = (cube.num_timestamps(), cube.num_bands(), cube.height * cube.width);
    let mut data = Vec::with_capacity(t * (b + 1) * plane);
    for s in 0..t {
        let frame = &cube.data[s * b * plane..(s + 1) * b * plane];
        data.extend_from_slice(frame);
        let (r, n) = (&frame[red * plane..(red + 1) * plane], &frame[nir * plane..(nir + 1) * plane]);
        data.extend(r.iter().zip(n).map(|(&r, &n)| ndvi(r, n)));
    }
    let mut bands = cube.bands.clone();
    bands.push(NDVI.into());
    SitsCube::new(cube.timestamps.clone(), bands, cube.height, cube.width, data, cube.validity.clone())
}

fn ndvi(red: f32, nir: f32) -> f32 {
    let (r, n) = (red as f64, nir as f64);
    let den = n + r;
    if den == 0.0 {
        return 0.0;
    }
    ((n - r) / den).clamp(-1.0, 1.0) as f32
}

/// Per-band extremes over the whole time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub bands: Vec<String>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormalizationStats {
    /// Extremes over valid observations; `pixels` (row-major `H × W`)
    /// restricts them to selected pixels, e.g. training objects only.
    pub fn compute(cube: &SitsCube, pixels: Option<&[bool]>) -> Result<Self> {
        let (t, b, h, w) = (cube.num_timestamps(), cube.num_bands(), cube.height, cube.width);
        if pixels.is_some_and(|p| p.len() != h * w) {
            return Err(Error::Data("pixel selection does not match the cube".into()));
        }
        let mut min = vec![f32::INFINITY; b];
        let mut max = vec![f32::NEG_INFINITY; b];
        for s in 0..t {
            for p in 0..h * w {
                if pixels.is_some_and(|sel| !sel[p]) || !cube.is_valid(s, p / w, p % w) {
                    continue;
                }
                for band in 0..b {
                    let v = cube.data[(s * b + band) * h * w + p];
                    min[band] = min[band].min(v);
                    max[band] = max[band].max(v);
                }
            }
        }
        for (band, name) in cube.bands.iter().enumerate() {
            if !(max[band] > min[band]) {
                return Err(Error::ConstantBand(name.clone()));
            }
        }
        Ok(Self {
            bands: cube.bands.clone(),
            min,
            max,
        })
    }
}

/// `(x − min) / (max − min)` per band, clamped to `[0, 1]`.
pub fn normalize_minmax(cube: &SitsCube, stats: &NormalizationStats) -> Result<SitsCube> {
    if stats.bands != cube.bands {
        return Err(Error::Data(format!(
            "normalization bands {:?} differ from cube bands {:?}",
            stats.bands, cube.bands
        )));
    }
    for (band, name) in stats.bands.iter().enumerate() {
        if !(stats.max[band] > stats.min[band]) {
            return Err(Error::ConstantBand(name.clone()));
        }
    }
    let (b, plane) = (cube.num_bands(), cube.height * cube.width);
    let mut data = cube.data.clone();
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let band = i % b;
        let lo = stats.min[band] as f64;
        let span = stats.max[band] as f64 - lo;
        for v in chunk {
            *v = ((*v as f64 - lo) / span).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SitsCube { data, ..cube.clone() })
}
