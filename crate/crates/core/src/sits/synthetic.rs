//! Desk-scale benchmark: rectangular objects whose pixels follow a
//! per-class seasonal reflectance profile plus Gaussian noise.

use serde::{Deserialize, Serialize};

use super::{LabelRaster, SitsCube};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const SYNTHETIC_BANDS: [&str; 4] = ["B2", "B3", "B4", "B8"];
const YEAR: f64 = 365.0;
const CLOUD_LEVEL: f64 = 0.85;

/// Per-band sinusoid `offset + amplitude · sin(2π·day/365 + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub offset: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl ClassProfile {
    pub fn value(&self, band: usize, day: i64) -> f64 {
        self.offset[band] + self.amplitude[band] * (std::f64::consts::TAU * day as f64 / YEAR + self.phase[band]).sin()
    }

    /// Flattened `[t][b]` series at the given dates.
    pub fn series(&self, days: &[i64]) -> Vec<f64> {
        days.iter()
            .flat_map(|&d| (0..self.offset.len()).map(move |b| self.value(b, d)))
            .collect()
    }

    fn sample(rng: &mut SeededRng) -> Self {
        let bands = SYNTHETIC_BANDS.len();
        Self {
            offset: (0..bands).map(|_| rng.uniform_range(0.05, 0.45)).collect(),
            amplitude: (0..bands).map(|_| rng.uniform_range(0.02, 0.15)).collect(),
            phase: (0..bands).map(|_| rng.uniform_range(0.0, std::f64::consts::TAU)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub timestamps: usize,
    pub objects_per_class: usize,
    /// Inclusive range of object side lengths.
    pub object_size: (usize, usize),
    pub noise_sigma: f64,
    pub cloud_prob: f64,
    /// Smallest allowed L2 distance between two class series.
    pub min_separation: f64,
    pub seed: u64,
    /// Explicit class profiles; sampled from the seed when absent.
    pub profiles: Option<Vec<ClassProfile>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            height: 64,
            width: 64,
            timestamps: 8,
            objects_per_class: 10,
            object_size: (4, 6),
            noise_sigma: 0.01,
            cloud_prob: 0.1,
            min_separation: 0.3,
            seed: 0,
            profiles: None,
        }
    }
}

impl SyntheticSpec {
    /// Acquisition dates spread evenly over one year.
    pub fn days(&self) -> Vec<i64> {
        (0..self.timestamps)
            .map(|i| (i as f64 * YEAR / self.timestamps as f64).round() as i64)
            .collect()
    }

    /// Class profiles (given or sampled) with the separation constraint
    /// enforced; index 0 is class 1.
    pub fn class_profiles(&self) -> Result<Vec<ClassProfile>> {
        let days = self.days();
        if let Some(p) = &self.profiles {
            if p.len() != self.num_classes || p.iter().any(|c| c.offset.len() != SYNTHETIC_BANDS.len()) {
                return Err(Error::Data("explicit profiles do not match the class and band counts".into()));
            }
            check_separation(p, &days, self.min_separation)?;
            return Ok(p.clone());
        }
        let mut rng = SeededRng::derive(self.seed, "synthetic.profiles");
        for _ in 0..10_000 {
            let p: Vec<ClassProfile> = (0..self.num_classes).map(|_| ClassProfile::sample(&mut rng)).collect();
            if check_separation(&p, &days, self.min_separation).is_ok() {
                return Ok(p);
            }
        }
        Err(Error::Data(format!(
            "could not draw {} class profiles at separation {}",
            self.num_classes, self.min_separation
        )))
    }

    fn background(&self) -> ClassProfile {
        let mut rng = SeededRng::derive(self.seed, "synthetic.background");
        ClassProfile::sample(&mut rng)
    }
}

pub fn profile_distance(a: &ClassProfile, b: &ClassProfile, days: &[i64]) -> f64 {
    a.series(days)
        .iter()
        .zip(b.series(days))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_separation(p: &[ClassProfile], days: &[i64], min: f64) -> Result<()> {
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d = profile_distance(&p[i], &p[j], days);
            if d < min {
                return Err(Error::Data(format!("classes {} and {} are only {d:.4} apart", i + 1, j + 1)));
            }
        }
    }
    Ok(())
}

/// Builds a 4-band cube (B2, B3, B4, B8) with a cloud mask and its label
/// raster. Objects sit one per lattice cell, cells assigned at random.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SitsCube, LabelRaster)> {
    let (lo, hi) = spec.object_size;
    if spec.num_classes < 1 || spec.timestamps < 1 || lo < 1 || lo > hi {
        return Err(Error::Data("synthetic spec needs classes, dates and a valid size range".into()));
    }
    if !(0.0..1.0).contains(&spec.cloud_prob) || spec.noise_sigma < 0.0 {
        return Err(Error::Data("cloud probability must be in [0, 1) and noise nonnegative".into()));
    }
    let profiles = spec.class_profiles()?;
    let background = spec.background();
    let days = spec.days();
    let (h, w, t, b) = (spec.height, spec.width, spec.timestamps, SYNTHETIC_BANDS.len());

    // Cells leave a one-pixel gap so neighbouring objects never touch.
    let cell = hi + 1;
    let (cells_r, cells_c) = (h / cell, w / cell);
    let total = spec.num_classes * spec.objects_per_class;
    if cells_r * cells_c < total {
        return Err(Error::Data(format!(
            "{total} objects of side up to {hi} do not fit a {h}×{w} grid ({} cells)",
            cells_r * cells_c
        )));
    }
    let mut place = SeededRng::derive(spec.seed, "synthetic.layout");
    let mut cells: Vec<usize> = (0..cells_r * cells_c).collect();
    place.shuffle(&mut cells);

    let mut labels = vec![0i32; h * w];
    let mut objects = vec![0i32; h * w];
    for (k, &c) in cells.iter().take(total).enumerate() {
        let class = k / spec.objects_per_class;
        let (sh, sw) = (lo + place.below(hi - lo + 1), lo + place.below(hi - lo + 1));
        let r0 = (c / cells_c) * cell + place.below(cell - sh);
        let c0 = (c % cells_c) * cell + place.below(cell - sw);
        for r in r0..r0 + sh {
            for col in c0..c0 + sw {
                labels[r * w + col] = class as i32 + 1;
                objects[r * w + col] = k as i32 + 1;
            }
        }
    }

    let mut noise = SeededRng::derive(spec.seed, "synthetic.noise");
    let mut data = vec![0f32; t * b * h * w];
    for p in 0..h * w {
        let profile = match labels[p] {
            0 => &background,
            l => &profiles[l as usize - 1],
        };
        for (s, &day) in days.iter().enumerate() {
            for band in 0..b {
                let v = profile.value(band, day) + spec.noise_sigma * noise.normal();
                data[(s * b + band) * h * w + p] = v as f32;
            }
        }
    }

    let mut clouds = SeededRng::derive(spec.seed, "synthetic.clouds");
    let mut validity = vec![true; t * h * w];
    if spec.cloud_prob > 0.0 {
        for p in 0..h * w {
            for s in 0..t {
                validity[s * h * w + p] = !clouds.bernoulli(spec.cloud_prob);
            }
            if (0..t).all(|s| !validity[s * h * w + p]) {
                validity[clouds.below(t) * h * w + p] = true;
            }
            for s in (0..t).filter(|&s| !validity[s * h * w + p]) {
                for band in 0..b {
                    let v = CLOUD_LEVEL + 0.05 * clouds.uniform();
                    data[(s * b + band) * h * w + p] = v as f32;
                }
            }
        }
    }

    let cube = SitsCube::new(
        days,
        SYNTHETIC_BANDS.iter().map(|s| s.to_string()).collect(),
        h,
        w,
        data,
        Some(validity),
    )?;
    let raster = LabelRaster::new(h, w, spec.num_classes, labels, objects)?;
    Ok((cube, raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticSpec {
        SyntheticSpec {
            noise_sigma: 0.0,
            cloud_prob: 0.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_classes_are_uniform() {
        let (cube, raster) = generate_synthetic(&quiet()).unwrap();
        let t = cube.num_timestamps();
        let mut first: Vec<Option<Vec<f32>>> = vec![None; 4];
        for row in 0..cube.height {
            for col in 0..cube.width {
                let series: Vec<f32> = (0..t).flat_map(|s| (0..4).map(move |b| (s, b))).map(|(s, b)| cube.value(s, b, row, col)).collect();
                let slot = &mut first[raster.label(row, col) as usize];
                match slot {
                    Some(s) => assert_eq!(s, &series),
                    None => *slot = Some(series),
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn default_classes_are_well_separated() {
        let spec = SyntheticSpec::default();
        let p = spec.class_profiles().unwrap();
        let days = spec.days();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                sum += profile_distance(&p[i], &p[j], &days);
                pairs += 1;
            }
        }
        assert!(sum / pairs as f64 > 10.0 * spec.noise_sigma);
    }

    #[test]
    fn layout_matches_spec() {
        let spec = SyntheticSpec::default();
        let (cube, raster) = generate_synthetic(&spec).unwrap();
        assert_eq!(cube.bands, SYNTHETIC_BANDS);
        assert_eq!((cube.height, cube.width, cube.num_timestamps()), (64, 64, 8));
        let by_class = raster.objects_by_class();
        assert!(by_class.iter().all(|o| o.len() == spec.objects_per_class));
        // Every pixel keeps at least one clear acquisition.
        for row in 0..64 {
            for col in 0..64 {
                assert!((0..8).any(|s| cube.is_valid(s, row, col)));
            }
        }
        let mask = cube.validity.as_ref().unwrap();
        let cloudy = mask.iter().filter(|&&v| !v).count() as f64 / mask.len() as f64;
        assert!((cloudy - 0.1).abs() < 0.02, "{cloudy}");
    }

    #[test]
    fn too_many_objects_are_rejected() {
        let spec = SyntheticSpec {
            objects_per_class: 200,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn relabeling_moves_profiles_with_labels() {
        let spec = SyntheticSpec {
            cloud_prob: 0.0,
            ..SyntheticSpec::default()
        };
        let profiles = spec.class_profiles().unwrap();
        let perm = [2usize, 0, 1];
        let permuted = SyntheticSpec {
            profiles: Some(perm.iter().map(|&i| profiles[i].clone()).collect()),
            ..spec.clone()
        };
        let (a, la) = generate_synthetic(&spec).unwrap();
        let (b, lb) = generate_synthetic(&permuted).unwrap();
        assert_eq!(la, lb);
        let days = spec.days();
        for row in (0..64).step_by(3) {
            for col in (0..64).step_by(3) {
                let l = la.label(row, col);
                if l == 0 {
                    continue;
                }
                let k = l as usize - 1;
                for (s, &d) in days.iter().enumerate() {
                    for band in 0..4 {
                        let ra = a.value(s, band, row, col) as f64 - profiles[k].value(band, d);
                        let rb = b.value(s, band, row, col) as f64 - profiles[perm[k]].value(band, d);
                        assert!((ra - rb).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
