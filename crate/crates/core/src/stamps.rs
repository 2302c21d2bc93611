//! Stamp data model, normalization and the STMP dataset file format.
//!
//! A [`Stamp`] is a small multi-channel image stored channel-major
//! (`channel, row, col`). Datasets are persisted in the little-endian STMP
//! format:
//!
//! ```text
//! "STMP"            4 bytes magic
//! version   u16     = 1
//! flags     u16     bit0 = labels present
//! n_samples u64
//! channels  u32
//! height    u32
//! width     u32
//! pixels    f32 * n_samples*channels*height*width   (sample, channel, row, col)
//! labels    u8  * n_samples                          (only if bit0; 0 = outlier, 1 = inlier)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const STMP_MAGIC: [u8; 4] = *b"STMP";
pub const STMP_VERSION: u16 = 1;
pub const STMP_HEADER_LEN: usize = 4 + 2 + 2 + 8 + 4 + 4 + 4;
const FLAG_LABELS: u16 = 1;

/// One multi-channel image sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Stamp<T> {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> Stamp<T> {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        let expected = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::DimensionOverflow(format!("{channels}x{height}x{width}")))?;
        if pixels.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} stamp needs {expected} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(Stamp {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Stamp {
            channels,
            height,
            width,
            pixels: vec![T::zero(); channels * height * width],
        }
    }

    /// Builds a stamp from per-channel row-major planes.
    pub fn from_channels(height: usize, width: usize, planes: &[Vec<T>]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::ShapeMismatch(format!(
                    "channel plane has {} pixels, expected {}",
                    p.len(),
                    height * width
                )));
            }
            pixels.extend_from_slice(p);
        }
        Stamp::new(planes.len(), height, width, pixels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.pixels[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: T) {
        self.pixels[(c * self.height + row) * self.width + col] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> Stamp<U> {
        Stamp {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| U::from_f64_lossy(p.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Replaces NaNs by 0, then min-max maps each channel independently to [-1, 1].
///
/// A constant channel maps to all zeros. Infinite values do not take part in
/// the min/max and are clamped to the nearest bound.
pub fn normalize_stamp<T: Scalar>(s: &Stamp<T>) -> Result<Stamp<T>> {
    if s.is_empty() {
        return Err(Error::EmptyStamp);
    }
    let mut out = s.clone();
    let two = T::one() + T::one();
    for c in 0..out.channels {
        let ch = out.channel_mut(c);
        for p in ch.iter_mut() {
            if p.is_nan() {
                *p = T::zero();
            }
        }
        let (lo, hi) = ch
            .iter()
            .filter(|p| p.is_finite())
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        if !(hi > lo) {
            ch.iter_mut().for_each(|p| *p = T::zero());
            continue;
        }
        let range = hi - lo;
        for p in ch.iter_mut() {
            *p = if *p == T::infinity() {
                T::one()
            } else if *p == T::neg_infinity() {
                -T::one()
            } else {
                two * (*p - lo) / range - T::one()
            };
        }
    }
    Ok(out)
}

/// Centered `size x size` window of every channel.
///
/// When `dim - size` is odd the extra row/column is dropped from the
/// high-index side.
pub fn center_crop<T: Scalar>(s: &Stamp<T>, size: usize) -> Result<Stamp<T>> {
    if size == 0 || size > s.height || size > s.width {
        return Err(Error::CropTooLarge {
            size,
            height: s.height,
            width: s.width,
        });
    }
    let r0 = (s.height - size) / 2;
    let c0 = (s.width - size) / 2;
    let mut pixels = Vec::with_capacity(s.channels * size * size);
    for c in 0..s.channels {
        for r in r0..r0 + size {
            let start = (c * s.height + r) * s.width + c0;
            pixels.extend_from_slice(&s.pixels[start..start + size]);
        }
    }
    Stamp::new(s.channels, size, size, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn from_stem(stem: &str) -> Option<Self> {
        match stem {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Class tag carried by labelled datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Outlier = 0,
    Inlier = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Outlier),
            1 => Ok(Label::Inlier),
            other => Err(Error::Malformed(format!("label byte {other} is not 0 or 1"))),
        }
    }

    pub fn is_inlier(self) -> bool {
        self == Label::Inlier
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StampDataset<T> {
    pub stamps: Vec<Stamp<T>>,
    pub labels: Option<Vec<Label>>,
    pub split: Option<Split>,
}

impl<T: Scalar> StampDataset<T> {
    pub fn new(stamps: Vec<Stamp<T>>, labels: Option<Vec<Label>>, split: Option<Split>) -> Result<Self> {
        let d = StampDataset { stamps, labels, split };
        d.validate()?;
        Ok(d)
    }

    pub fn inliers(stamps: Vec<Stamp<T>>, split: Split) -> Result<Self> {
        let labels = vec![Label::Inlier; stamps.len()];
        StampDataset::new(stamps, Some(labels), Some(split))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.stamps.first() {
            let shape = first.shape();
            if let Some((i, s)) = self.stamps.iter().enumerate().find(|(_, s)| s.shape() != shape) {
                return Err(Error::ShapeMismatch(format!(
                    "stamp {i} has shape {:?}, dataset shape is {shape:?}",
                    s.shape()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.stamps.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} stamps",
                    labels.len(),
                    self.stamps.len()
                )));
            }
            if matches!(self.split, Some(Split::Train) | Some(Split::Validation))
                && labels.iter().any(|l| !l.is_inlier())
            {
                return Err(Error::InvalidConfig(
                    "train and validation splits must contain inliers only".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    /// `(channels, height, width)` shared by every stamp, if any.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.stamps.first().map(Stamp::shape)
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[i])
    }
}

pub fn write_dataset<T: Scalar, W: Write>(d: &StampDataset<T>, mut w: W) -> Result<()> {
    d.validate()?;
    let (c, h, wd) = d.shape().unwrap_or((0, 0, 0));
    let flags = if d.labels.is_some() { FLAG_LABELS } else { 0 };
    let mut header = Vec::with_capacity(STMP_HEADER_LEN);
    header.extend_from_slice(&STMP_MAGIC);
    header.extend_from_slice(&STMP_VERSION.to_le_bytes());
    header.extend_from_slice(&flags.to_le_bytes());
    header.extend_from_slice(&(d.len() as u64).to_le_bytes());
    for dim in [c, h, wd] {
        let dim = u32::try_from(dim).map_err(|_| Error::DimensionOverflow(format!("dimension {dim}")))?;
        header.extend_from_slice(&dim.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(c * h * wd * 4);
    for s in &d.stamps {
        buf.clear();
        for &p in s.pixels() {
            buf.extend_from_slice(&p.to_f32_storage().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(labels) = &d.labels {
        let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_from<T: Scalar, R: Read>(mut r: R) -> Result<StampDataset<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<StampDataset<T>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: STMP_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != STMP_MAGIC {
        return Err(Error::BadMagic {
            expected: STMP_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < STMP_HEADER_LEN {
        return Err(Error::Truncated {
            expected: STMP_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != STMP_VERSION {
        return Err(Error::VersionMismatch {
            expected: STMP_VERSION,
            found: version,
        });
    }
    let flags = u16_at(6);
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let (c, h, w) = (u32_at(16) as u64, u32_at(20) as u64, u32_at(24) as u64);
    let per_stamp = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::DimensionOverflow(format!("{c}x{h}x{w}")))?;
    let pixel_bytes = n
        .checked_mul(per_stamp)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::DimensionOverflow(format!("{n} samples of {c}x{h}x{w}")))?;
    let label_bytes = if flags & FLAG_LABELS != 0 { n } else { 0 };
    let expected = (STMP_HEADER_LEN as u64)
        .checked_add(pixel_bytes)
        .and_then(|v| v.checked_add(label_bytes))
        .ok_or_else(|| Error::DimensionOverflow("total file size".into()))?;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - expected
        )));
    }
    let per_stamp = per_stamp as usize;
    let mut stamps = Vec::with_capacity(n as usize);
    let mut offset = STMP_HEADER_LEN;
    for _ in 0..n {
        let pixels: Vec<T> = bytes[offset..offset + per_stamp * 4]
            .chunks_exact(4)
            .map(|b| T::from_f32_storage(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        offset += per_stamp * 4;
        stamps.push(Stamp::new(c as usize, h as usize, w as usize, pixels)?);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        Some(
            bytes[offset..offset + n as usize]
                .iter()
                .map(|&b| Label::from_u8(b))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(StampDataset {
        stamps,
        labels,
        split: None,
    })
}

/// Reads an STMP file. The split tag is taken from the file stem when it is
/// one of `train`, `validation` or `test`.
pub fn read_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<StampDataset<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut d: StampDataset<T> = decode_dataset(&bytes)?;
    d.split = path.file_stem().and_then(|s| s.to_str()).and_then(Split::from_stem);
    d.validate()?;
    Ok(d)
}

pub fn write_dataset_file<T: Scalar>(d: &StampDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
