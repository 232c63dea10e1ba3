use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::LabelRaster;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.3, 0.2, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Object id → split part; every pixel of an object lands in one part.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub parts: BTreeMap<i32, SplitPart>,
}

impl SplitAssignment {
    pub fn part(&self, object: i32) -> Option<SplitPart> {
        self.parts.get(&object).copied()
    }

    pub fn objects(&self, part: SplitPart) -> impl Iterator<Item = i32> + '_ {
        self.parts.iter().filter(move |(_, &p)| p == part).map(|(&o, _)| o)
    }

    /// Row-major `H × W` selection of pixels whose object is in `part`.
    pub fn pixel_mask(&self, labels: &LabelRaster, part: SplitPart) -> Vec<bool> {
        labels
            .labels
            .iter()
            .zip(&labels.objects)
            .map(|(&l, &o)| l != 0 && self.part(o) == Some(part))
            .collect()
    }
}

/// Shuffles each class's objects and cuts them at the given fractions
/// (rounded), so every class is represented in every part when it has at
/// least three objects.
pub fn object_split(labels: &LabelRaster, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut rng = SeededRng::derive(seed, "object_split");
    let mut parts = BTreeMap::new();
    for (class, mut objects) in labels.objects_by_class().into_iter().enumerate() {
        let n = objects.len();
        if n == 0 {
            continue;
        }
        rng.shuffle(&mut objects);
        let mut train = (fractions[0] * n as f64).round() as usize;
        let mut val = (fractions[1] * n as f64).round() as usize;
        if n < 3 {
            log::warn!("class {} has only {n} object(s); assigning to train first", class + 1);
            train = train.max(1);
        }
        train = train.min(n);
        val = val.min(n - train);
        for (i, o) in objects.into_iter().enumerate() {
            let part = if i < train {
                SplitPart::Train
            } else if i < train + val {
                SplitPart::Val
            } else {
                SplitPart::Test
            };
            parts.insert(o, part);
        }
    }
    Ok(SplitAssignment { parts })
}

/// Lines `object_id,split`, ascending by object id.
pub fn write_split(w: &mut impl Write, split: &SplitAssignment) -> Result<()> {
    for (o, p) in &split.parts {
        writeln!(w, "{o},{p}")?;
    }
    Ok(())
}

pub fn read_split(r: impl BufRead) -> Result<SplitAssignment> {
    let mut parts = BTreeMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("split line {}: `{line}`", n + 1));
        let (o, p) = line.split_once(',').ok_or_else(bad)?;
        let o: i32 = o.trim().parse().map_err(|_| bad())?;
        let p: SplitPart = p.trim().parse().map_err(|_| bad())?;
        if parts.insert(o, p).is_some() {
            return Err(Error::Format(format!("object {o} listed twice in split file")));
        }
    }
    Ok(SplitAssignment { parts })
}

pub fn save_split(path: &Path, split: &SplitAssignment) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_split(&mut w, split)?;
    w.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<SplitAssignment> {
    read_split(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One row of `n` single-pixel objects of class 1.
    fn row_of_objects(n: usize) -> LabelRaster {
        LabelRaster::new(1, n, 1, vec![1; n], (1..=n as i32).collect()).unwrap()
    }

    #[test]
    fn ten_objects_split_three_two_five() {
        let s = object_split(&row_of_objects(10), DEFAULT_FRACTIONS, 1).unwrap();
        let count = |p| s.objects(p).count();
        assert_eq!((count(SplitPart::Train), count(SplitPart::Val), count(SplitPart::Test)), (3, 2, 5));
    }

    #[test]
    fn same_seed_same_assignment() {
        let r = row_of_objects(37);
        assert_eq!(object_split(&r, DEFAULT_FRACTIONS, 9).unwrap(), object_split(&r, DEFAULT_FRACTIONS, 9).unwrap());
        assert_ne!(object_split(&r, DEFAULT_FRACTIONS, 9).unwrap(), object_split(&r, DEFAULT_FRACTIONS, 10).unwrap());
    }

    #[test]
    fn small_classes_fill_train_first() {
        let s = object_split(&row_of_objects(1), DEFAULT_FRACTIONS, 0).unwrap();
        assert_eq!(s.part(1), Some(SplitPart::Train));
        let s = object_split(&row_of_objects(2), DEFAULT_FRACTIONS, 0).unwrap();
        assert_eq!(s.objects(SplitPart::Train).count(), 1);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(object_split(&row_of_objects(4), [0.3, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn every_class_within_one_object_of_target() {
        for n in 1..60usize {
            for seed in 0..3 {
                let s = object_split(&row_of_objects(n), DEFAULT_FRACTIONS, seed).unwrap();
                assert_eq!(s.parts.len(), n);
                for (part, f) in SplitPart::ALL.iter().zip(DEFAULT_FRACTIONS) {
                    let got = s.objects(*part).count() as f64;
                    if n >= 3 {
                        assert!((got - f * n as f64).abs() <= 1.0, "n={n} {part}: {got}");
                    }
                }
            }
        }
    }

    #[test]
    fn split_file_round_trip() {
        let s = object_split(&row_of_objects(12), DEFAULT_FRACTIONS, 4).unwrap();
        let mut buf = Vec::new();
        write_split(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().all(|l| ["train", "val", "test"].contains(&l.split(',').nth(1).unwrap())));
        assert_eq!(read_split(buf.as_slice()).unwrap(), s);
        assert!(read_split("1,holdout\n".as_bytes()).is_err());
        assert!(read_split("1,train\n1,test\n".as_bytes()).is_err());
    }
}
