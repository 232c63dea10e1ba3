//! Output files written by the command-line tool.
//!
//! Class map (`DMAP`): magic, version u32, H W C u32, then `H·W` i32 labels
//! row-major; 0 marks a pixel without a prediction.
//!
//! Feature table (`DFEA`): magic, version u32, rows u64, width u32, then per
//! row i32 object id, i32 label (1-based) and `width` f32 features. The CSV
//! form has the header `object_id,label,f0,…` and one line per row.
//!
//! Everything is little-endian.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};

use anyhow::{bail, ensure, Context, Result};
use duplo::train::ConfusionMatrix;

const MAP_MAGIC: [u8; 4] = *b"DMAP";
const FEATURE_MAGIC: [u8; 4] = *b"DFEA";
const VERSION: u32 = 1;

/// Class colors for map previews, class 1 first; class 0 is black.
pub const PALETTE: [[u8; 3]; 13] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
    [170, 110, 40],
    [128, 128, 128],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Row-major labels in `{0} ∪ [1, C]`.
    pub labels: Vec<i32>,
}

impl ClassMap {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAP_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for d in [self.height, self.width, self.num_classes] {
            w.write_all(&u32::try_from(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.labels.len() * 4);
        for v in &self.labels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head).context("class map header is truncated")?;
        ensure!(head[..4] == MAP_MAGIC, "not a class map file");
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
        ensure!(word(4) as u32 == VERSION, "unsupported class map version {}", word(4));
        let (height, width, num_classes) = (word(8), word(12), word(16));
        let n = height.checked_mul(width).context("class map dimensions overflow")?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        ensure!(bytes.len() == n * 4, "class map payload has {} bytes, expected {}", bytes.len(), n * 4);
        let labels: Vec<i32> = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        ensure!(
            labels.iter().all(|&l| l >= 0 && l as usize <= num_classes),
            "class map holds labels outside 0..={num_classes}"
        );
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    /// Binary PPM with one palette color per class.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &l in &self.labels {
            let rgb = match l {
                0 => [0, 0, 0],
                l => PALETTE[(l as usize - 1) % PALETTE.len()],
            };
            out.extend_from_slice(&rgb);
        }
        out
    }
}

/// `t ∈ [0, 1]` on a linear blue to red ramp.
pub fn ramp(t: f64) -> [u8; 3] {
    let r = (255.0 * t.clamp(0.0, 1.0)).round() as u8;
    [r, 0, 255 - r]
}

/// Confusion heat map as a binary PPM, each cell a `cell × cell` block.
/// Intensity is the row-normalized count (recall of the true class).
pub fn confusion_ppm(m: &ConfusionMatrix, cell: usize) -> Vec<u8> {
    let c = m.num_classes;
    let side = c * cell;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        let i = y / cell;
        let row = m.row_sum(i);
        for x in 0..side {
            let j = x / cell;
            let t = if row == 0 { 0.0 } else { m.get(i, j) as f64 / row as f64 };
            out.extend_from_slice(&ramp(t));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub width: usize,
    pub object_ids: Vec<i32>,
    /// 1-based class labels.
    pub labels: Vec<i32>,
    /// Row-major `rows × width`.
    pub values: Vec<f32>,
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.object_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut line = String::from("object_id,label");
        for k in 0..self.width {
            write!(line, ",f{k}")?;
        }
        writeln!(w, "{line}")?;
        for i in 0..self.rows() {
            line.clear();
            write!(line, "{},{}", self.object_ids[i], self.labels[i])?;
            for v in self.row(i) {
                // Shortest representation that parses back to the same f32.
                write!(line, ",{v}")?;
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().context("feature CSV is empty")??;
        let width = header.split(',').count().checked_sub(2).context("feature CSV header is too short")?;
        let mut t = Self {
            width,
            object_ids: Vec::new(),
            labels: Vec::new(),
            values: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            ensure!(fields.len() == width + 2, "feature CSV line {} has {} fields", n + 2, fields.len());
            t.object_ids.push(fields[0].parse()?);
            t.labels.push(fields[1].parse()?);
            for f in &fields[2..] {
                t.values.push(f.parse()?);
            }
        }
        Ok(t)
    }

    pub fn write_bin(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        w.write_all(&u32::try_from(self.width)?.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 + 4 * self.width);
        for i in 0..self.rows() {
            buf.clear();
            buf.extend_from_slice(&self.object_ids[i].to_le_bytes());
            buf.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in self.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_bin(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head).context("feature table header is truncated")?;
        if head[..4] != FEATURE_MAGIC {
            bail!("not a feature table file");
        }
        ensure!(head[4..8] == VERSION.to_le_bytes(), "unsupported feature table version");
        let rows = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let width = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let stride = 8 + 4 * width;
        ensure!(
            bytes.len() as u64 == rows * stride as u64,
            "feature table payload has {} bytes, expected {rows} rows of {stride}",
            bytes.len()
        );
        let word = |c: &[u8]| -> [u8; 4] { c.try_into().unwrap() };
        let mut t = Self {
            width,
            object_ids: Vec::new(),
            labels: Vec::new(),
            values: Vec::with_capacity(rows as usize * width),
        };
        for rec in bytes.chunks_exact(stride) {
            t.object_ids.push(i32::from_le_bytes(word(&rec[0..4])));
            t.labels.push(i32::from_le_bytes(word(&rec[4..8])));
            t.values.extend(rec[8..].chunks_exact(4).map(|c| f32::from_le_bytes(word(c))));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_map_round_trip_and_preview() {
        let m = ClassMap {
            height: 2,
            width: 3,
            num_classes: 13,
            labels: vec![0, 1, 2, 13, 5, 1],
        };
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(ClassMap::read(&mut buf.as_slice()).unwrap(), m);
        let ppm = m.to_ppm();
        let body = &ppm[ppm.len() - 18..];
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(&body[0..3], &[0, 0, 0]);
        assert_eq!(&body[9..12], &PALETTE[12]);
        buf[8] = 9;
        assert!(ClassMap::read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn diagonal_confusion_peaks_on_diagonal() {
        let m = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
        let ppm = confusion_ppm(&m, 2);
        let header = b"P6\n6 6\n255\n".len();
        let px = |x: usize, y: usize| &ppm[header + 3 * (y * 6 + x)..header + 3 * (y * 6 + x) + 3];
        for y in 0..6 {
            for x in 0..6 {
                let want = if x / 2 == y / 2 { [255, 0, 0] } else { [0, 0, 255] };
                assert_eq!(px(x, y), want);
            }
        }
        assert_eq!(ramp(0.5), [128, 0, 127]);
    }

    #[test]
    fn feature_formats_agree() {
        let t = FeatureTable {
            width: 3,
            object_ids: vec![4, 9],
            labels: vec![1, 2],
            values: vec![0.1, -2.5e-7, 1.0 / 3.0, f32::MAX, 0.0, -1.25],
        };
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let mut bin = Vec::new();
        t.write_bin(&mut bin).unwrap();
        let a = FeatureTable::read_csv(csv.as_slice()).unwrap();
        let b = FeatureTable::read_bin(&mut bin.as_slice()).unwrap();
        assert_eq!(a, t);
        assert_eq!(b, t);
        assert!(String::from_utf8(csv).unwrap().starts_with("object_id,label,f0,f1,f2\n4,1,"));
    }
}
