//! Satellite image time series: containers, preprocessing, patches, splits
//! and a synthetic benchmark.

mod io;
mod patch;
mod preprocess;
mod split;
mod synthetic;

pub use io::{read_cube, read_labels, write_cube, write_labels, load_cube, load_labels, save_cube, save_labels};
pub use patch::{extract_patch, extract_patches, mirror_index, PatchSample};
pub use preprocess::{compute_ndvi, gapfill_linear, normalize_minmax, NormalizationStats};
pub use split::{load_split, object_split, read_split, save_split, write_split, SplitAssignment, SplitPart, DEFAULT_FRACTIONS};
pub use synthetic::{generate_synthetic, ClassProfile, SyntheticSpec};

use crate::error::{Error, Result};

pub const NDVI: &str = "NDVI";
pub const RED: &str = "B4";
pub const NIR: &str = "B8";

/// `T × B × H × W` radiometric volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SitsCube {
    /// Acquisition dates in days since epoch, strictly increasing.
    pub timestamps: Vec<i64>,
    pub bands: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// `[t][b][row][col]`
    pub data: Vec<f32>,
    /// `[t][row][col]`, false where the observation is cloudy.
    pub validity: Option<Vec<bool>>,
}

impl SitsCube {
    pub fn new(
        timestamps: Vec<i64>,
        bands: Vec<String>,
        height: usize,
        width: usize,
        data: Vec<f32>,
        validity: Option<Vec<bool>>,
    ) -> Result<Self> {
        if timestamps.is_empty() || bands.is_empty() || height == 0 || width == 0 {
            return Err(Error::Data("cube dimensions must be positive".into()));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        let t = timestamps.len();
        let expected = checked_product(&[t, bands.len(), height, width])?;
        if data.len() != expected {
            return Err(Error::Data(format!("cube holds {} values, expected {expected}", data.len())));
        }
        if let Some(v) = &validity {
            if v.len() != t * height * width {
                return Err(Error::Data(format!("mask holds {} flags, expected {}", v.len(), t * height * width)));
            }
        }
        Ok(Self {
            timestamps,
            bands,
            height,
            width,
            data,
            validity,
        })
    }

    pub fn num_timestamps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == name)
    }

    pub fn index(&self, t: usize, b: usize, row: usize, col: usize) -> usize {
        ((t * self.bands.len() + b) * self.height + row) * self.width + col
    }

    pub fn value(&self, t: usize, b: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(t, b, row, col)]
    }

    pub fn is_valid(&self, t: usize, row: usize, col: usize) -> bool {
        self.validity
            .as_ref()
            .is_none_or(|v| v[(t * self.height + row) * self.width + col])
    }
}

/// `H × W` ground truth: class labels (0 = unlabeled, 1..=C) and object ids
/// (0 = none).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<i32>,
    pub objects: Vec<i32>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<i32>, objects: Vec<i32>) -> Result<Self> {
        let n = checked_product(&[height, width])?;
        if labels.len() != n || objects.len() != n {
            return Err(Error::Data(format!("label raster needs {n} entries per layer")));
        }
        let raster = Self {
            height,
            width,
            num_classes,
            labels,
            objects,
        };
        raster.validate()?;
        Ok(raster)
    }

    fn validate(&self) -> Result<()> {
        let mut object_label = std::collections::HashMap::new();
        for (i, (&l, &o)) in self.labels.iter().zip(&self.objects).enumerate() {
            if l < 0 || l as usize > self.num_classes {
                return Err(Error::Data(format!("label {l} at pixel {i} outside 0..={}", self.num_classes)));
            }
            if l == 0 {
                continue;
            }
            if o == 0 {
                return Err(Error::Data(format!("labeled pixel {i} has no object id")));
            }
            if *object_label.entry(o).or_insert(l) != l {
                return Err(Error::Data(format!("object {o} carries more than one label")));
            }
        }
        Ok(())
    }

    pub fn label(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    pub fn object(&self, row: usize, col: usize) -> i32 {
        self.objects[row * self.width + col]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Distinct object ids per class, ascending; index 0 is class 1.
    pub fn objects_by_class(&self) -> Vec<Vec<i32>> {
        let mut per = vec![std::collections::BTreeSet::new(); self.num_classes];
        for (&l, &o) in self.labels.iter().zip(&self.objects) {
            if l > 0 {
                per[l as usize - 1].insert(o);
            }
        }
        per.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

pub(crate) fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))
}
