//! Transformation catalog: primitive operations, their composition, the
//! built-in catalogs and the 5x5 filter kernels.
//!
//! A [`TransformSpec`] is applied in a fixed order:
//! horizontal flip, shift (vacated pixels set to 0), rotation by a multiple of
//! 90 degrees counter-clockwise, Gaussian filter, Laplacian filter. Every
//! channel is transformed identically.
//!
//! Shifts are stored in unit steps `{-1, 0, 1}` per axis and scaled to pixels
//! at application time; the default magnitude is `round(0.25 * width)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::Stamp;

pub const KERNEL_SIZE: usize = 5;
pub const GAUSSIAN_SIGMA: f64 = 1.0;
pub const LAPLACIAN_SIGMA: f64 = 0.5;

pub type Kernel5<T> = [[T; KERNEL_SIZE]; KERNEL_SIZE];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        self.quarter_turns() as u32 * 90
    }

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_degrees(deg: u32) -> Option<Self> {
        match deg {
            0 => Some(Rotation::R0),
            90 => Some(Rotation::R90),
            180 => Some(Rotation::R180),
            270 => Some(Rotation::R270),
            _ => None,
        }
    }
}

/// The nine shift directions in canonical order; index 0 is no shift.
pub const SHIFTS: [(i8, i8); 9] = [
    (0, 0),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// A composition of primitive image operations.
///
/// `shift` is `(dx, dy)` in unit steps: positive `dx` moves content towards
/// higher column indices, positive `dy` towards higher row indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformSpec {
    pub flip: bool,
    pub shift: (i8, i8),
    pub rotation: Rotation,
    pub gauss: bool,
    pub laplace: bool,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        flip: false,
        shift: (0, 0),
        rotation: Rotation::R0,
        gauss: false,
        laplace: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Number of non-trivial primitives in the composition.
    pub fn operation_count(&self) -> usize {
        usize::from(self.flip)
            + usize::from(self.shift != (0, 0))
            + usize::from(self.rotation != Rotation::R0)
            + usize::from(self.gauss)
            + usize::from(self.laplace)
    }

    pub fn shift_index(&self) -> usize {
        SHIFTS
            .iter()
            .position(|&s| s == self.shift)
            .expect("shift components are unit steps")
    }

    fn sort_key(&self) -> (bool, bool, bool, usize, usize) {
        (
            self.laplace,
            self.gauss,
            self.flip,
            self.shift_index(),
            self.rotation.quarter_turns(),
        )
    }

    /// Line in the catalog file format.
    pub fn to_line(&self) -> String {
        format!(
            "flip={} shift={},{} rot={} gauss={} laplace={}",
            u8::from(self.flip),
            self.shift.0,
            self.shift.1,
            self.rotation.degrees(),
            u8::from(self.gauss),
            u8::from(self.laplace)
        )
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            return f.write_str("id");
        }
        let mut parts = Vec::new();
        if self.flip {
            parts.push("flip".to_string());
        }
        if self.shift != (0, 0) {
            parts.push(format!("shift({},{})", self.shift.0, self.shift.1));
        }
        if self.rotation != Rotation::R0 {
            parts.push(format!("rot{}", self.rotation.degrees()));
        }
        if self.gauss {
            parts.push("gauss".into());
        }
        if self.laplace {
            parts.push("laplace".into());
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for TransformSpec {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let mut flip = None;
        let mut shift = None;
        let mut rotation = None;
        let mut gauss = None;
        let mut laplace = None;
        let parse_bool = |v: &str, key: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(format!("{key} must be 0 or 1, got {v:?}")),
        };
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {field:?}"))?;
            let slot_taken = match key {
                "flip" => flip.replace(parse_bool(value, key)?).is_some(),
                "gauss" => gauss.replace(parse_bool(value, key)?).is_some(),
                "laplace" => laplace.replace(parse_bool(value, key)?).is_some(),
                "rot" => {
                    let deg: u32 = value.parse().map_err(|_| format!("bad rotation {value:?}"))?;
                    let r = Rotation::from_degrees(deg)
                        .ok_or_else(|| format!("rotation must be 0, 90, 180 or 270, got {deg}"))?;
                    rotation.replace(r).is_some()
                }
                "shift" => {
                    let (dx, dy) = value
                        .split_once(',')
                        .ok_or_else(|| format!("shift must be dx,dy, got {value:?}"))?;
                    let unit = |v: &str| -> std::result::Result<i8, String> {
                        match v.trim().parse::<i8>() {
                            Ok(s @ -1..=1) => Ok(s),
                            _ => Err(format!("shift components must be -1, 0 or 1, got {v:?}")),
                        }
                    };
                    shift.replace((unit(dx)?, unit(dy)?)).is_some()
                }
                other => return Err(format!("unknown field {other:?}")),
            };
            if slot_taken {
                return Err(format!("duplicate field {key:?}"));
            }
        }
        let missing = |name: &str| format!("missing field {name:?}");
        Ok(TransformSpec {
            flip: flip.ok_or_else(|| missing("flip"))?,
            shift: shift.ok_or_else(|| missing("shift"))?,
            rotation: rotation.ok_or_else(|| missing("rot"))?,
            gauss: gauss.ok_or_else(|| missing("gauss"))?,
            laplace: laplace.ok_or_else(|| missing("laplace"))?,
        })
    }
}

/// Default shift magnitude in pixels for a stamp of the given width.
pub fn default_shift_pixels(width: usize) -> usize {
    (0.25 * width as f64).round() as usize
}

/// The 5x5 Gaussian kernel (sigma 1), normalized to unit sum.
pub fn gaussian_kernel<T: Scalar>() -> Kernel5<T> {
    let s2 = 2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
    let raw = kernel_from(|u, v| (-(u * u + v * v) / s2).exp());
    let total: f64 = raw.iter().flatten().sum();
    cast_kernel(raw.map(|row| row.map(|g| g / total)))
}

/// Laplacian-of-Gaussian (sigma 0.5) sampled on the 5x5 grid, mean-subtracted
/// so the entries sum to zero.
pub fn laplacian_kernel<T: Scalar>() -> Kernel5<T> {
    let s = LAPLACIAN_SIGMA;
    let raw = kernel_from(|u, v| {
        let r2 = (u * u + v * v) / (2.0 * s * s);
        -1.0 / (std::f64::consts::PI * s.powi(4)) * (1.0 - r2) * (-r2).exp()
    });
    let mean = raw.iter().flatten().sum::<f64>() / (KERNEL_SIZE * KERNEL_SIZE) as f64;
    cast_kernel(raw.map(|row| row.map(|g| g - mean)))
}

fn kernel_from(f: impl Fn(f64, f64) -> f64) -> Kernel5<f64> {
    let half = (KERNEL_SIZE / 2) as f64;
    let mut k = [[0.0; KERNEL_SIZE]; KERNEL_SIZE];
    for (r, row) in k.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f(r as f64 - half, c as f64 - half);
        }
    }
    k
}

fn cast_kernel<T: Scalar>(k: Kernel5<f64>) -> Kernel5<T> {
    k.map(|row| row.map(T::from_f64_lossy))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // mirror about the edge pixel without repeating it: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    let i = if i >= n { 2 * n - 2 - i } else { i };
    i as usize
}

/// Same-size 2-D convolution of a row-major channel with reflect padding.
///
/// This is true convolution (`out[y, x] = sum k[u, v] * in[y - u, x - v]`);
/// for the symmetric kernels used here it coincides with correlation.
/// The padding mirrors about the edge pixel without repeating it.
pub fn convolve_2d<T: Scalar>(channel: &[T], height: usize, width: usize, kernel: &Kernel5<T>) -> Result<Vec<T>> {
    if height < KERNEL_SIZE || width < KERNEL_SIZE {
        return Err(Error::ChannelTooSmall {
            height,
            width,
            kernel: KERNEL_SIZE,
        });
    }
    if channel.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "channel has {} pixels, expected {height}x{width}",
            channel.len()
        )));
    }
    let half = (KERNEL_SIZE / 2) as isize;
    let mut out = vec![T::zero(); height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = T::zero();
            for (ku, krow) in kernel.iter().enumerate() {
                let sy = reflect(y as isize - (ku as isize - half), height);
                let row = &channel[sy * width..(sy + 1) * width];
                for (kv, &k) in krow.iter().enumerate() {
                    let sx = reflect(x as isize - (kv as isize - half), width);
                    acc = acc + k * row[sx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    Ok(out)
}

/// Applies transformation specs to stamps with a fixed shift magnitude and
/// precomputed kernels.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    shift_pixels: Option<usize>,
    gauss: Kernel5<T>,
    laplace: Kernel5<T>,
}

impl<T: Scalar> Default for Transformer<T> {
    fn default() -> Self {
        Transformer::new(None)
    }
}

impl<T: Scalar> Transformer<T> {
    /// `shift_pixels = None` uses [`default_shift_pixels`] of the stamp width.
    pub fn new(shift_pixels: Option<usize>) -> Self {
        Transformer {
            shift_pixels,
            gauss: gaussian_kernel(),
            laplace: laplacian_kernel(),
        }
    }

    pub fn shift_pixels_for(&self, width: usize) -> usize {
        self.shift_pixels.unwrap_or_else(|| default_shift_pixels(width))
    }

    pub fn apply(&self, spec: &TransformSpec, s: &Stamp<T>) -> Result<Stamp<T>> {
        let (channels, h, w) = s.shape();
        if spec.rotation != Rotation::R0 && h != w {
            return Err(Error::NonSquare { height: h, width: w });
        }
        let step = self.shift_pixels_for(w);
        let dx = spec.shift.0 as isize * step as isize;
        let dy = spec.shift.1 as isize * step as isize;
        if spec.shift.0 != 0 && step >= w {
            return Err(Error::ShiftTooLarge { shift: step, dim: w });
        }
        if spec.shift.1 != 0 && step >= h {
            return Err(Error::ShiftTooLarge { shift: step, dim: h });
        }
        if spec.is_identity() {
            return Ok(s.clone());
        }
        let turns = spec.rotation.quarter_turns();
        let mut out = Vec::with_capacity(s.len());
        let mut plane = vec![T::zero(); h * w];
        for c in 0..channels {
            let src = s.channel(c);
            // Pull-based: out(r, col) = shifted(rotate^-1(r, col)).
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = unrotate(r, col, h, turns);
                    let (sr, sc) = (sr as isize - dy, sc as isize - dx);
                    let v = if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                        T::zero()
                    } else {
                        let sc = sc as usize;
                        let sc = if spec.flip { w - 1 - sc } else { sc };
                        src[sr as usize * w + sc]
                    };
                    plane[r * w + col] = v;
                }
            }
            if spec.gauss {
                plane = convolve_2d(&plane, h, w, &self.gauss)?;
            }
            if spec.laplace {
                plane = convolve_2d(&plane, h, w, &self.laplace)?;
            }
            out.extend_from_slice(&plane);
        }
        Stamp::new(channels, h, w, out)
    }
}

/// Source coordinate of a counter-clockwise rotation by `turns` quarter turns
/// on a square `n x n` grid.
#[inline]
fn unrotate(r: usize, c: usize, n: usize, turns: usize) -> (usize, usize) {
    match turns % 4 {
        0 => (r, c),
        1 => (c, n - 1 - r),
        2 => (n - 1 - r, n - 1 - c),
        _ => (n - 1 - c, r),
    }
}

/// Applies `spec` with the default shift magnitude.
pub fn apply<T: Scalar>(spec: &TransformSpec, s: &Stamp<T>) -> Result<Stamp<T>> {
    Transformer::default().apply(spec, s)
}

/// Ordered, duplicate-free list of transformations whose first entry is the
/// identity. The position of a spec is its class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSet {
    name: String,
    specs: Vec<TransformSpec>,
}

impl TransformSet {
    pub fn new(name: impl Into<String>, specs: Vec<TransformSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidCatalog("catalog is empty".into()));
        }
        if !specs[0].is_identity() {
            return Err(Error::InvalidCatalog(format!(
                "first transformation must be the identity, got {}",
                specs[0]
            )));
        }
        for (i, a) in specs.iter().enumerate() {
            if let Some(j) = specs[..i].iter().position(|b| b == a) {
                return Err(Error::InvalidCatalog(format!(
                    "transformation {a} appears at positions {j} and {i}"
                )));
            }
        }
        Ok(TransformSet {
            name: name.into(),
            specs,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, i: usize) -> &TransformSpec {
        &self.specs[i]
    }

    /// Keeps the specs at `indices` (in the given order) under a new name.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        TransformSet::new(name, indices.iter().map(|&i| self.specs[i]).collect())
    }

    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let spec = line
                .parse::<TransformSpec>()
                .map_err(|message| Error::CatalogParse { line: n + 1, message })?;
            specs.push(spec);
        }
        TransformSet::new(name, specs)
    }

    /// Reads a catalog in the one-spec-per-line text format.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        TransformSet::parse(name, &text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# catalog {} ({} transformations)\n", self.name, self.len());
        for spec in &self.specs {
            s.push_str(&spec.to_line());
            s.push('\n');
        }
        s
    }
}

/// Built-in catalog names accepted by [`build_catalog`].
pub const CATALOG_NAMES: [&str; 10] = [
    "geo72",
    "geo81G",
    "geo81L",
    "geo99",
    "geo144G",
    "geo144L",
    "geo288",
    "shifts9",
    "shifts36",
    "flipshift18",
];

fn all_specs() -> Vec<TransformSpec> {
    let mut specs = Vec::with_capacity(288);
    for laplace in [false, true] {
        for gauss in [false, true] {
            for flip in [false, true] {
                for shift in SHIFTS {
                    for rotation in Rotation::ALL {
                        specs.push(TransformSpec {
                            flip,
                            shift,
                            rotation,
                            gauss,
                            laplace,
                        });
                    }
                }
            }
        }
    }
    debug_assert!(specs.windows(2).all(|w| w[0].sort_key() < w[1].sort_key()));
    specs
}

/// Canonical enumeration of a built-in catalog, ordered lexicographically by
/// `(laplace, gauss, flip, shift index, rotation)`.
pub fn build_catalog(name: &str) -> Result<TransformSet> {
    let geometric = |s: &TransformSpec| !s.gauss && !s.laplace;
    let plain_shift = |s: &TransformSpec| !s.flip && s.rotation == Rotation::R0;
    let keep: Box<dyn Fn(&TransformSpec) -> bool> = match name {
        "geo72" => Box::new(geometric),
        "geo81G" => Box::new(move |s| geometric(s) || (s.gauss && !s.laplace && plain_shift(s))),
        "geo81L" => Box::new(move |s| geometric(s) || (s.laplace && !s.gauss && plain_shift(s))),
        "geo99" => Box::new(move |s| geometric(s) || plain_shift(s)),
        "geo144G" => Box::new(|s| !s.laplace),
        "geo144L" => Box::new(|s| !s.gauss),
        "geo288" => Box::new(|_| true),
        "shifts9" => Box::new(move |s| geometric(s) && plain_shift(s)),
        "shifts36" => Box::new(plain_shift),
        "flipshift18" => Box::new(move |s| geometric(s) && s.rotation == Rotation::R0),
        other => {
            return Err(Error::UnknownCatalog {
                name: other.to_string(),
                valid: format!("{}, or a custom catalog file", CATALOG_NAMES.join(", ")),
            })
        }
    };
    TransformSet::new(name, all_specs().into_iter().filter(|s| keep(s)).collect())
}
