//! Dataset directories in the DiLiGenT layout and the `.fmap` float map format.
//!
//! A dataset root holds numbered images (`001.png`, `002.png`, ... or
//! `.fmap`), `mask.png`, and optionally `light_directions.txt`,
//! `light_intensities.txt` and `normal_gt.fmap`.
//!
//! `.fmap` layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"FMAP"`               |
//! | 4      | 4    | `u32` height                  |
//! | 8      | 4    | `u32` width                   |
//! | 12     | 4    | `u32` channels `k`            |
//! | 16     | 4hwk | `f32` values, row-major `[row][col][k]` |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::types::{ImageStack, LightSet, Mask, NormalMap, Vec3};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const MASK_FILE: &str = "mask.png";
pub const LIGHT_DIRECTIONS_FILE: &str = "light_directions.txt";
pub const LIGHT_INTENSITIES_FILE: &str = "light_intensities.txt";
pub const NORMAL_GT_FILE: &str = "normal_gt.fmap";

/// A dense `h x w x k` field of floats.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "float map buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(FloatMap { height, width, channels, data })
    }

    pub fn from_f64(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<Self> {
        FloatMap::new(height, width, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_normals(nm: &NormalMap) -> Self {
        let data = nm.to_field().into_iter().map(|v| v as f32).collect();
        FloatMap { height: nm.height(), width: nm.width(), channels: 3, data }
    }

    /// Interprets a 3-channel map as normals over `mask`.
    pub fn to_normals(&self, mask: Mask) -> Result<NormalMap> {
        if self.channels != 3 || self.height != mask.height() || self.width != mask.width() {
            return Err(Error::ShapeMismatch(format!(
                "float map {}x{}x{} cannot hold normals for a {}x{} mask",
                self.height,
                self.width,
                self.channels,
                mask.height(),
                mask.width()
            )));
        }
        let normals = self
            .data
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        NormalMap::from_unnormalized(mask, normals)
    }

    /// Mask of pixels holding a nonzero vector.
    pub fn nonzero_mask(&self) -> Mask {
        let k = self.channels;
        let data = self.data.chunks_exact(k).map(|c| c.iter().any(|v| *v != 0.0)).collect();
        Mask::new(self.height, self.width, data).expect("shape is consistent")
    }
}

pub fn write_float_map(path: impl AsRef<Path>, map: &FloatMap) -> Result<()> {
    if let Some(v) = map.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("float map contains non-finite value {v}")));
    }
    if map.data.len() != map.height * map.width * map.channels {
        return Err(Error::ShapeMismatch("float map buffer does not match its header".into()));
    }
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    w.write_all(FMAP_MAGIC)?;
    for d in [map.height, map.width, map.channels] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &map.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_float_map(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Read { path: path.into(), source })?;
    decode_float_map(&bytes)
}

pub fn decode_float_map(bytes: &[u8]) -> Result<FloatMap> {
    if bytes.len() < 16 {
        return Err(Error::CorruptFloatMap(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FMAP_MAGIC {
        return Err(Error::CorruptFloatMap("bad magic".into()));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, k) = (dim(4), dim(8), dim(12));
    if k == 0 {
        return Err(Error::CorruptFloatMap("zero channels".into()));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(k))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::CorruptFloatMap("dimensions overflow".into()))?;
    if bytes.len() - 16 != expected {
        return Err(Error::CorruptFloatMap(format!(
            "header says {h}x{w}x{k} ({expected} payload bytes) but file has {}",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(FloatMap { height: h, width: w, channels: k, data })
}

/// Loads an image as linear floats in `[0, 1]`: 8-bit codes divide by 255,
/// 16-bit by 65535, float maps are taken as-is. Alpha is dropped.
pub fn read_raster(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "fmap") {
        return read_float_map(path);
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Read { path: path.into(), source },
        other => Error::Decode { path: path.into(), message: other.to_string() },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match &img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().as_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().as_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageLumaA16(_) => (1, img.to_luma16().as_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgba16(_) => (3, img.to_rgb16().as_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb32F(b) => (3, b.as_raw().clone()),
        _ => (3, img.to_rgb32f().into_raw()),
    };
    FloatMap::new(h, w, channels, data)
}

/// Writes a 1- or 3-channel field as a 16-bit PNG; values are clipped to `[0, 1]`.
pub fn write_png16(path: impl AsRef<Path>, map: &FloatMap) -> Result<()> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let data: Vec<u16> = map.data.iter().map(|&v| q(v)).collect();
    let (w, h) = (map.width as u32, map.height as u32);
    let res = match map.channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).map(|b| b.save(path.as_ref())),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data).map(|b| b.save(path.as_ref())),
        k => return Err(Error::InvalidInput(format!("cannot write {k}-channel PNG"))),
    };
    finish_save(path.as_ref(), res)
}

/// Writes an 8-bit RGB buffer (`h x w x 3`).
pub fn write_rgb8(path: impl AsRef<Path>, height: usize, width: usize, rgb: Vec<u8>) -> Result<()> {
    let res = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, rgb).map(|b| b.save(path.as_ref()));
    finish_save(path.as_ref(), res)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let res = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, data)
        .map(|b| b.save(path.as_ref()));
    finish_save(path.as_ref(), res)
}

fn finish_save(path: &Path, res: Option<image::ImageResult<()>>) -> Result<()> {
    match res {
        None => Err(Error::ShapeMismatch("buffer does not match image size".into())),
        Some(Err(e)) => Err(Error::Decode { path: path.into(), message: e.to_string() }),
        Some(Ok(())) => Ok(()),
    }
}

/// Reads a mask image; any nonzero pixel is inside.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let map = read_raster(path)?;
    let k = map.channels;
    let data = map.data.chunks_exact(k).map(|c| c.iter().any(|v| *v > 0.0)).collect();
    Mask::new(map.height, map.width, data)
}

/// Parses whitespace-separated `x y z` rows and renormalizes each to unit length.
pub fn read_light_directions(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let rows = read_numeric_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.len() != 3 {
            return Err(Error::Parse { path: path.into(), line, message: format!("expected 3 values, got {}", row.len()) });
        }
        let v = Vec3::new(row[0], row[1], row[2]);
        let n = v.norm();
        if !(n > 0.0) {
            return Err(Error::ZeroLengthLight { path: path.into(), line });
        }
        out.push(v / n);
    }
    Ok(out)
}

/// One positive scalar per row; per-channel triples are averaged.
pub fn read_light_intensities(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let rows = read_numeric_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let e = match row.len() {
            1 => row[0],
            3 => (row[0] + row[1] + row[2]) / 3.0,
            k => {
                return Err(Error::Parse { path: path.into(), line, message: format!("expected 1 or 3 values, got {k}") })
            }
        };
        if !(e > 0.0) {
            return Err(Error::Parse { path: path.into(), line, message: format!("intensity must be positive, got {e}") });
        }
        out.push(e);
    }
    Ok(out)
}

fn read_numeric_rows(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        rows.push((i + 1, vals));
    }
    Ok(rows)
}

pub fn write_lights(dir: impl AsRef<Path>, lights: &LightSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut d = String::new();
    let mut e = String::new();
    for (l, i) in lights.directions().iter().zip(lights.intensities()) {
        d.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", l.x, l.y, l.z));
        e.push_str(&format!("{i:.17e}\n"));
    }
    fs::write(dir.join(LIGHT_DIRECTIONS_FILE), d)?;
    fs::write(dir.join(LIGHT_INTENSITIES_FILE), e)?;
    Ok(())
}

/// Locations of the files that make up one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDescriptor {
    pub root: PathBuf,
    pub images: Vec<PathBuf>,
    pub mask: PathBuf,
    pub light_directions: Option<PathBuf>,
    pub light_intensities: Option<PathBuf>,
    pub normal_gt: Option<PathBuf>,
}

impl DatasetDescriptor {
    /// Scans `root` for numbered images (file stem all digits, `.png` or
    /// `.fmap`) and the optional companion files.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let entries = fs::read_dir(&root).map_err(|source| Error::Read { path: root.clone(), source })?;
        let mut images = Vec::new();
        for entry in entries {
            let path = entry?.path();
            let numbered = path.file_stem().and_then(|s| s.to_str()).is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
            let ext_ok = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png") || e == "fmap");
            if numbered && ext_ok && path.is_file() {
                images.push(path);
            }
        }
        images.sort();
        let opt = |name: &str| {
            let p = root.join(name);
            p.is_file().then_some(p)
        };
        Ok(DatasetDescriptor {
            mask: root.join(MASK_FILE),
            light_directions: opt(LIGHT_DIRECTIONS_FILE),
            light_intensities: opt(LIGHT_INTENSITIES_FILE),
            normal_gt: opt(NORMAL_GT_FILE),
            images,
            root,
        })
    }
}

/// Everything loaded from a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub stack: ImageStack,
    pub lights: Option<LightSet>,
    pub normal_gt: Option<NormalMap>,
}

pub fn read_dataset(desc: &DatasetDescriptor) -> Result<Dataset> {
    if desc.images.is_empty() {
        return Err(Error::InvalidInput(format!("no numbered images found in {}", desc.root.display())));
    }
    let mask = read_mask(&desc.mask)?;
    let (h, w) = (mask.height(), mask.width());
    let mut channels = None;
    let mut data = Vec::new();
    for path in &desc.images {
        let img = read_raster(path)?;
        if img.height != h || img.width != w {
            return Err(Error::DimensionMismatch {
                path: path.clone(),
                message: format!("image is {}x{}, mask is {h}x{w}", img.height, img.width),
            });
        }
        match channels {
            None => channels = Some(img.channels),
            Some(c) if c != img.channels => {
                return Err(Error::DimensionMismatch {
                    path: path.clone(),
                    message: format!("image has {} channels, earlier images have {c}", img.channels),
                })
            }
            _ => {}
        }
        if img.channels != 1 && img.channels != 3 {
            return Err(Error::DimensionMismatch { path: path.clone(), message: format!("{} channels", img.channels) });
        }
        data.extend(img.data.iter().map(|&v| (v as f64).max(0.0)));
    }
    let stack = ImageStack::new(desc.images.len(), h, w, channels.unwrap(), data, mask.clone())?;

    let lights = match &desc.light_directions {
        None => None,
        Some(dpath) => {
            let dirs = read_light_directions(dpath)?;
            if dirs.len() != stack.count() {
                return Err(Error::DimensionMismatch {
                    path: dpath.clone(),
                    message: format!("{} light rows for {} images", dirs.len(), stack.count()),
                });
            }
            let ints = match &desc.light_intensities {
                Some(ipath) => {
                    let v = read_light_intensities(ipath)?;
                    if v.len() != stack.count() {
                        return Err(Error::DimensionMismatch {
                            path: ipath.clone(),
                            message: format!("{} intensity rows for {} images", v.len(), stack.count()),
                        });
                    }
                    v
                }
                None => vec![1.0; stack.count()],
            };
            Some(LightSet::new(dirs, ints)?)
        }
    };

    let normal_gt = match &desc.normal_gt {
        None => None,
        Some(p) => {
            let map = read_float_map(p)?;
            if map.height != h || map.width != w || map.channels != 3 {
                return Err(Error::DimensionMismatch {
                    path: p.clone(),
                    message: format!("ground truth is {}x{}x{}", map.height, map.width, map.channels),
                });
            }
            Some(map.to_normals(mask)?)
        }
    };
    Ok(Dataset { stack, lights, normal_gt })
}

/// Writes a dataset directory: `NNN.png` (16-bit), `mask.png`, lights, and ground truth.
pub fn write_dataset(
    root: impl AsRef<Path>,
    stack: &ImageStack,
    lights: Option<&LightSet>,
    normal_gt: Option<&NormalMap>,
) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let (h, w, c) = (stack.height(), stack.width(), stack.channels());
    for i in 0..stack.count() {
        let map = FloatMap::from_f64(h, w, c, stack.image(i))?;
        write_png16(root.join(format!("{:03}.png", i + 1)), &map)?;
    }
    write_mask(root.join(MASK_FILE), stack.mask())?;
    if let Some(l) = lights {
        write_lights(root, l)?;
    }
    if let Some(n) = normal_gt {
        write_float_map(root.join(NORMAL_GT_FILE), &FloatMap::from_normals(n))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_map_rejects_nan_and_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fmap");
        let bad = FloatMap::new(1, 1, 1, vec![f32::NAN]).unwrap();
        assert!(write_float_map(&p, &bad).is_err());
        assert!(matches!(decode_float_map(b"FMA"), Err(Error::CorruptFloatMap(_))));
        assert!(matches!(decode_float_map(b"XXXX\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0"), Err(Error::CorruptFloatMap(_))));
        // Header claims 2x1x1 but only one value follows.
        assert!(matches!(decode_float_map(b"FMAP\x02\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0"), Err(Error::CorruptFloatMap(_))));
    }

    #[test]
    fn depth_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fmap");
        let m = FloatMap::new(2, 3, 1, vec![0.5, -1.0, 2.0, 3.25, 1e-7, -0.0]).unwrap();
        write_float_map(&p, &m).unwrap();
        assert_eq!(read_float_map(&p).unwrap(), m);
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 6 * 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn float_map_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e6f32..1e6, 8 * 8 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.fmap");
            let m = FloatMap::new(8, 8, 3, vals).unwrap();
            write_float_map(&p, &m).unwrap();
            let back = read_float_map(&p).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn light_rows_are_renormalized_and_zero_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0 0 2\n3 0 4\n").unwrap();
        let d = read_light_directions(&p).unwrap();
        assert!((d[1] - Vec3::new(0.6, 0.0, 0.8)).norm() < 1e-15);
        assert!(d.iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
        fs::write(&p, "0 0 1\n0 0 0\n").unwrap();
        assert!(matches!(read_light_directions(&p), Err(Error::ZeroLengthLight { line: 2, .. })));
    }

    #[test]
    fn intensity_triples_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.txt");
        fs::write(&p, "1.0 2.0 3.0\n0.5\n").unwrap();
        assert_eq!(read_light_intensities(&p).unwrap(), vec![2.0, 0.5]);
        fs::write(&p, "-1\n").unwrap();
        assert!(read_light_intensities(&p).is_err());
    }
}
