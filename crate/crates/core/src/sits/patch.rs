use super::{LabelRaster, SitsCube};
use crate::model::PATCH;

/// Spatial context of one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `[t][b][5][5]`, the pixel itself at (2, 2).
    pub data: Vec<f32>,
    /// Zero-based class index (raster label − 1).
    pub label: usize,
    pub object_id: i32,
    pub row: usize,
    pub col: usize,
}

/// Reflects an out-of-range index back into `0..n` without repeating the
/// edge: `-1 → 1`, `n → n − 2`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// `[t][b][5][5]` window centred on `(row, col)` with mirrored borders.
pub fn extract_patch(cube: &SitsCube, row: usize, col: usize) -> Vec<f32> {
    let half = (PATCH / 2) as isize;
    let rows: Vec<usize> = (-half..=half).map(|d| mirror_index(row as isize + d, cube.height)).collect();
    let cols: Vec<usize> = (-half..=half).map(|d| mirror_index(col as isize + d, cube.width)).collect();
    let mut out = Vec::with_capacity(cube.num_timestamps() * cube.num_bands() * PATCH * PATCH);
    for t in 0..cube.num_timestamps() {
        for b in 0..cube.num_bands() {
            for &r in &rows {
                for &c in &cols {
                    out.push(cube.value(t, b, r, c));
                }
            }
        }
    }
    out
}

/// One sample per labeled pixel, row-major by centre.
pub fn extract_patches(cube: &SitsCube, labels: &LabelRaster) -> Vec<PatchSample> {
    let mut out = Vec::with_capacity(labels.labeled_count());
    for row in 0..labels.height {
        for col in 0..labels.width {
            let l = labels.label(row, col);
            if l == 0 {
                continue;
            }
            out.push(PatchSample {
                data: extract_patch(cube, row, col),
                label: l as usize - 1,
                object_id: labels.object(row, col),
                row,
                col,
            });
        }
    }
    out
}
