//! Cube (`SITC`) and label raster (`SITL`) files.
//!
//! Cube: magic, version u32, T B H W u32, T × i64 timestamps, B band names
//! (u16 length + UTF-8), u8 has_mask, f32 data `[t][b][row][col]`, then mask
//! bytes `[t][row][col]` (1 = valid) when present.
//!
//! Labels: magic, version u32, H W C u32, i32 labels, i32 object ids.
//!
//! Everything is little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{checked_product, LabelRaster, SitsCube};
use crate::error::{Error, Result};

const CUBE_MAGIC: [u8; 4] = *b"SITC";
const LABEL_MAGIC: [u8; 4] = *b"SITL";
const VERSION: u32 = 1;

pub fn write_cube(w: &mut impl Write, cube: &SitsCube) -> Result<()> {
    w.write_all(&CUBE_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in [cube.num_timestamps(), cube.num_bands(), cube.height, cube.width] {
        put_u32(w, d)?;
    }
    for t in &cube.timestamps {
        w.write_all(&t.to_le_bytes())?;
    }
    for name in &cube.bands {
        let len = u16::try_from(name.len()).map_err(|_| Error::DimOverflow(format!("band name `{name}`")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    w.write_all(&[cube.validity.is_some() as u8])?;
    let mut buf = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    if let Some(mask) = &cube.validity {
        let bytes: Vec<u8> = mask.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_cube(r: &mut impl Read) -> Result<SitsCube> {
    check_header(r, CUBE_MAGIC)?;
    let t = get_u32(r, "dimensions")? as usize;
    let b = get_u32(r, "dimensions")? as usize;
    let h = get_u32(r, "dimensions")? as usize;
    let w = get_u32(r, "dimensions")? as usize;
    let values = checked_product(&[t, b, h, w])?;
    let mask_len = checked_product(&[t, h, w])?;
    values
        .checked_mul(4)
        .ok_or_else(|| Error::DimOverflow(format!("[{t}, {b}, {h}, {w}]")))?;

    let mut timestamps = Vec::with_capacity(t.min(1 << 16));
    for _ in 0..t {
        let mut buf = [0u8; 8];
        get_exact(r, &mut buf, "timestamps")?;
        timestamps.push(i64::from_le_bytes(buf));
    }
    let mut bands = Vec::with_capacity(b.min(1 << 8));
    for _ in 0..b {
        let mut len = [0u8; 2];
        get_exact(r, &mut len, "band names")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        get_exact(r, &mut name, "band names")?;
        bands.push(String::from_utf8(name).map_err(|_| Error::Format("band name is not UTF-8".into()))?);
    }
    let mut flag = [0u8; 1];
    get_exact(r, &mut flag, "mask flag")?;
    let has_mask = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("mask flag {other} is neither 0 nor 1"))),
    };

    let data = take(r, values * 4, "cube payload")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let validity = if has_mask {
        let bytes = take(r, mask_len, "mask payload")?;
        Some(bytes.into_iter().map(|v| v != 0).collect())
    } else {
        None
    };
    ensure_end(r)?;
    SitsCube::new(timestamps, bands, h, w, data, validity)
}

pub fn write_labels(w: &mut impl Write, raster: &LabelRaster) -> Result<()> {
    w.write_all(&LABEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in [raster.height, raster.width, raster.num_classes] {
        put_u32(w, d)?;
    }
    let mut buf = Vec::with_capacity(raster.labels.len() * 8);
    for v in raster.labels.iter().chain(&raster.objects) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_labels(r: &mut impl Read) -> Result<LabelRaster> {
    check_header(r, LABEL_MAGIC)?;
    let h = get_u32(r, "dimensions")? as usize;
    let w = get_u32(r, "dimensions")? as usize;
    let c = get_u32(r, "dimensions")? as usize;
    let n = checked_product(&[h, w, 8])? / 8;
    let read_layer = |r: &mut dyn Read, what: &str| -> Result<Vec<i32>> {
        Ok(take(r, n * 4, what)?
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let labels = read_layer(r, "label payload")?;
    let objects = read_layer(r, "object payload")?;
    ensure_end(r)?;
    LabelRaster::new(h, w, c, labels, objects)
}

pub fn save_cube(path: &Path, cube: &SitsCube) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cube(&mut w, cube)?;
    w.flush()?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<SitsCube> {
    read_cube(&mut BufReader::new(File::open(path)?))
}

pub fn save_labels(path: &Path, raster: &LabelRaster) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(&mut w, raster)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    read_labels(&mut BufReader::new(File::open(path)?))
}

fn check_header(r: &mut impl Read, magic: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    get_exact(r, &mut found, "magic")?;
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = get_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_exact(r: &mut (impl Read + ?Sized), buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    get_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads exactly `len` bytes without trusting `len` for the allocation.
fn take(r: &mut (impl Read + ?Sized), len: usize, what: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.take(len as u64).read_to_end(&mut out)?;
    if out.len() != len {
        return Err(Error::Truncated(format!("{what}: expected {len} bytes, found {}", out.len())));
    }
    Ok(out)
}

fn ensure_end(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sits::{generate_synthetic, SyntheticSpec};

    fn sample() -> (SitsCube, LabelRaster) {
        generate_synthetic(&SyntheticSpec {
            height: 24,
            width: 24,
            objects_per_class: 2,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn cube_and_labels_round_trip() {
        let (cube, raster) = sample();
        let mut buf = Vec::new();
        write_cube(&mut buf, &cube).unwrap();
        assert_eq!(read_cube(&mut buf.as_slice()).unwrap(), cube);
        let mut buf = Vec::new();
        write_labels(&mut buf, &raster).unwrap();
        assert_eq!(read_labels(&mut buf.as_slice()).unwrap(), raster);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (cube, raster) = sample();
        let mut buf = Vec::new();
        write_cube(&mut buf, &cube).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cube(&mut bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_cube(&mut bad.as_slice()), Err(Error::UnsupportedVersion(9))));

        let short = &buf[..buf.len() - 10];
        assert!(matches!(read_cube(&mut &short[..]), Err(Error::Truncated(_))));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_cube(&mut long.as_slice()), Err(Error::Format(_))));

        let mut huge = buf[..8].to_vec();
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_cube(&mut huge.as_slice()), Err(Error::DimOverflow(_))));

        let mut lbuf = Vec::new();
        write_labels(&mut lbuf, &raster).unwrap();
        assert!(matches!(read_cube(&mut lbuf.as_slice()), Err(Error::BadMagic { .. })));
        let short = &lbuf[..lbuf.len() - 1];
        assert!(matches!(read_labels(&mut &short[..]), Err(Error::Truncated(_))));
    }
}
