//! Synthetic astronomical stamp benchmark.
//!
//! Every stamp has template, science and difference channels (plus an
//! optional fourth `difference / noise_sigma` channel). Coordinates are
//! `(x, y) = (col, row)` with the grid centre at `c = (side - 1) / 2`, and
//! `blob(x0, y0, s, a)` is `a * exp(-((x - x0)^2 + (y - y0)^2) / (2 s^2))`.
//!
//! Inliers: centre `(c, c) + r (cos t, sin t)` with `r = jitter * sqrt(u)`,
//! `s ~ U(psf_sigma_range)`, template amplitude `a` and transient amplitude
//! `b` both `~ U(amplitude_range)`. Template is `blob(a)`, science is
//! `blob(a + b)`, difference is `blob(b)`. Independent `N(0, noise_sigma)`
//! noise is added to each channel. Nothing depends on orientation, so the
//! population is invariant under rotations by multiples of 90 degrees and
//! flips.
//!
//! Outliers carry one artifact in the difference channel:
//!
//! * `dipole`: template `blob(p + d)`, science `blob(p - d)` with `|2d| ~
//!   U(dipole_separation)` at a uniform angle; difference = science -
//!   template (a bad subtraction).
//! * `hot_pixel`: a single pixel of value `~ U(hot_pixel_range)`.
//! * `streak`: `h * exp(-dist^2 / (2 * 0.5^2))` where `dist` is the distance
//!   to a line through a random interior point at a uniform angle.
//! * `edge_step`: `h * [ (x - c, y - c) . (cos t, sin t) > o ]` with
//!   `o ~ U(-5, 5)`, a sharp discontinuity across a random chord.
//!
//! For everything but the dipole, template and science show the same sky
//! (blank, or one star at a uniform position with probability 1/2) and the
//! artifact is added to science as well as difference. All channels get the
//! same noise model as inliers, and every stamp is normalized with
//! [`normalize_stamp`].
//!
//! Randomness: stamp `i` of kind `kind` (0 inlier, 1 outlier) draws from
//! `ChaCha8Rng::seed_from_u64(seed)` on stream `(kind << 32) | i`, so the
//! output is independent of thread count and scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stamps::{normalize_stamp, Label, Split, Stamp, StampDataset};
use crate::transforms::{convolve_2d, laplacian_kernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Dipole,
    HotPixel,
    Streak,
    EdgeStep,
}

impl Artifact {
    pub const ALL: [Artifact; 4] = [
        Artifact::Dipole,
        Artifact::HotPixel,
        Artifact::Streak,
        Artifact::EdgeStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Artifact::Dipole => "dipole",
            Artifact::HotPixel => "hot_pixel",
            Artifact::Streak => "streak",
            Artifact::EdgeStep => "edge_step",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Total inliers; the test split takes `n_outliers` of them after train
    /// and validation.
    pub n_inliers: usize,
    pub n_outliers: usize,
    pub train: usize,
    pub validation: usize,
    pub side: usize,
    /// 3 (template, science, difference) or 4 (adds difference / noise).
    pub channels: usize,
    pub psf_sigma_range: (f64, f64),
    pub noise_sigma: f64,
    /// Maximum distance of the source from the stamp centre.
    pub jitter: f64,
    pub amplitude_range: (f64, f64),
    pub dipole_separation: (f64, f64),
    pub hot_pixel_range: (f64, f64),
    /// Probabilities of dipole, hot pixel, streak and edge step. Dipoles are
    /// the one kind a plain Laplacian detector barely sees, so they are kept
    /// rare by default.
    pub artifact_mix: [f64; 4],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_inliers: 2700,
            n_outliers: 400,
            train: 2000,
            validation: 300,
            side: 21,
            channels: 3,
            psf_sigma_range: (1.0, 1.8),
            noise_sigma: 0.05,
            jitter: 1.0,
            amplitude_range: (0.5, 1.5),
            dipole_separation: (2.0, 3.5),
            hot_pixel_range: (3.0, 6.0),
            artifact_mix: [0.1, 0.3, 0.3, 0.3],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// HiTS-sized split: 7000 / 1000 / 3000 + 3000.
    pub fn hits_scale() -> Self {
        SynthConfig {
            n_inliers: 11_000,
            n_outliers: 3000,
            train: 7000,
            validation: 1000,
            ..Default::default()
        }
    }

    /// Default splits with most outliers being edge steps.
    pub fn edge_dominated() -> Self {
        SynthConfig {
            artifact_mix: [0.05, 0.05, 0.1, 0.8],
            ..Default::default()
        }
    }

    pub fn test_inliers(&self) -> usize {
        self.n_outliers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let need = self.train + self.validation + self.n_outliers;
        if self.n_inliers < need {
            return bad(format!(
                "n_inliers = {} but train + validation + balanced test needs {need}",
                self.n_inliers
            ));
        }
        if self.side < 5 {
            return bad(format!("side must be at least 5, got {}", self.side));
        }
        if !(self.channels == 3 || self.channels == 4) {
            return bad(format!("channels must be 3 or 4, got {}", self.channels));
        }
        for (name, (lo, hi)) in [
            ("psf_sigma_range", self.psf_sigma_range),
            ("amplitude_range", self.amplitude_range),
            ("dipole_separation", self.dipole_separation),
            ("hot_pixel_range", self.hot_pixel_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!("{name} must satisfy 0 < low <= high, got ({lo}, {hi})"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.channels == 4 && self.noise_sigma == 0.0 {
            return bad("the 4-channel mode divides by noise_sigma, which is 0".into());
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad(format!("jitter must be >= 0, got {}", self.jitter));
        }
        let s: f64 = self.artifact_mix.iter().sum();
        if self.artifact_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return bad(format!(
                "artifact_mix must be non-negative and sum to 1, got {:?}",
                self.artifact_mix
            ));
        }
        Ok(())
    }

    fn centre(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }
}

/// Un-normalized channels of one generated stamp.
#[derive(Clone, Debug)]
pub struct RawStamp {
    pub side: usize,
    /// Template, science, difference (and SNR difference) planes, row-major.
    pub planes: Vec<Vec<f64>>,
    pub artifact: Option<Artifact>,
}

impl RawStamp {
    pub fn difference(&self) -> &[f64] {
        &self.planes[2]
    }

    pub fn to_stamp(&self) -> Result<Stamp<f32>> {
        let planes: Vec<Vec<f32>> = self
            .planes
            .iter()
            .map(|p| p.iter().map(|&v| v as f32).collect())
            .collect();
        let s = Stamp::from_channels(self.side, self.side, &planes)?;
        normalize_stamp(&s)
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn blob(side: usize, x0: f64, y0: f64, s: f64, a: f64) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let inv = 1.0 / (2.0 * s * s);
    for r in 0..side {
        for c in 0..side {
            let (dx, dy) = (c as f64 - x0, r as f64 - y0);
            out[r * side + c] = a * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    out
}

fn add_noise<R: Rng>(cfg: &SynthConfig, planes: &mut [Vec<f64>], rng: &mut R) {
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for p in planes.iter_mut() {
            p.iter_mut().for_each(|v| *v += n.sample(rng));
        }
    }
}

fn finish(cfg: &SynthConfig, mut planes: Vec<Vec<f64>>, artifact: Option<Artifact>, rng: &mut impl Rng) -> RawStamp {
    add_noise(cfg, &mut planes, rng);
    if cfg.channels == 4 {
        let snr = planes[2].iter().map(|v| v / cfg.noise_sigma).collect();
        planes.push(snr);
    }
    RawStamp {
        side: cfg.side,
        planes,
        artifact,
    }
}

/// A point source whose centre lies within `jitter` of the grid centre.
fn jittered_centre<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (f64, f64) {
    let r = cfg.jitter * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    (cfg.centre() + r * t.cos(), cfg.centre() + r * t.sin())
}

pub fn generate_inlier_raw<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> RawStamp {
    let s = uniform(rng, cfg.psf_sigma_range);
    let (x0, y0) = jittered_centre(cfg, rng);
    let a = uniform(rng, cfg.amplitude_range);
    let b = uniform(rng, cfg.amplitude_range);
    let planes = vec![
        blob(cfg.side, x0, y0, s, a),
        blob(cfg.side, x0, y0, s, a + b),
        blob(cfg.side, x0, y0, s, b),
    ];
    finish(cfg, planes, None, rng)
}

pub fn generate_inlier<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Stamp<f32>> {
    generate_inlier_raw(cfg, rng).to_stamp()
}

fn pick_artifact<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Artifact {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in Artifact::ALL.iter().zip(cfg.artifact_mix) {
        acc += p;
        if u < acc {
            return *a;
        }
    }
    // rounding in the cumulative sum; fall back to the last type with mass
    *Artifact::ALL
        .iter()
        .zip(cfg.artifact_mix)
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(a, _)| a)
        .expect("mix sums to 1")
}

fn sky<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    if rng.random::<f64>() < 0.5 {
        let hi = cfg.side as f64 - 1.0;
        let (x0, y0) = (rng.random_range(0.0..hi), rng.random_range(0.0..hi));
        let s = uniform(rng, cfg.psf_sigma_range);
        let a = uniform(rng, cfg.amplitude_range);
        blob(cfg.side, x0, y0, s, a)
    } else {
        vec![0.0; cfg.side * cfg.side]
    }
}

pub fn generate_outlier_raw<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> RawStamp {
    let kind = pick_artifact(cfg, rng);
    generate_artifact_raw(cfg, kind, rng)
}

pub fn generate_artifact_raw<R: Rng>(cfg: &SynthConfig, kind: Artifact, rng: &mut R) -> RawStamp {
    let side = cfg.side;
    let c = cfg.centre();
    if kind == Artifact::Dipole {
        let s = uniform(rng, cfg.psf_sigma_range);
        let sep = uniform(rng, cfg.dipole_separation);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let (x0, y0) = jittered_centre(cfg, rng);
        let (dx, dy) = (0.5 * sep * t.cos(), 0.5 * sep * t.sin());
        let a = uniform(rng, cfg.amplitude_range);
        let template = blob(side, x0 + dx, y0 + dy, s, a);
        let science = blob(side, x0 - dx, y0 - dy, s, a);
        let diff = science.iter().zip(&template).map(|(s, t)| s - t).collect();
        return finish(cfg, vec![template, science, diff], Some(kind), rng);
    }
    let template = sky(cfg, rng);
    let mut art = vec![0.0; side * side];
    match kind {
        Artifact::HotPixel => {
            let (r, col) = (rng.random_range(0..side), rng.random_range(0..side));
            art[r * side + col] = uniform(rng, cfg.hot_pixel_range);
        }
        Artifact::Streak => {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let margin = (side as f64 / 5.0).floor();
            let x0 = rng.random_range(margin..side as f64 - 1.0 - margin);
            let y0 = rng.random_range(margin..side as f64 - 1.0 - margin);
            let h = uniform(rng, cfg.amplitude_range);
            for r in 0..side {
                for col in 0..side {
                    let dist = (-(col as f64 - x0) * t.sin() + (r as f64 - y0) * t.cos()).abs();
                    art[r * side + col] = h * (-dist * dist / (2.0 * 0.25)).exp();
                }
            }
        }
        Artifact::EdgeStep => {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let off = rng.random_range(-5.0..5.0);
            let h = uniform(rng, cfg.amplitude_range);
            for r in 0..side {
                for col in 0..side {
                    let proj = (col as f64 - c) * t.cos() + (r as f64 - c) * t.sin() - off;
                    if proj > 0.0 {
                        art[r * side + col] = h;
                    }
                }
            }
        }
        Artifact::Dipole => unreachable!(),
    }
    let science = template.iter().zip(&art).map(|(t, a)| t + a).collect();
    finish(cfg, vec![template, science, art], Some(kind), rng)
}

pub fn generate_outlier<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Stamp<f32>> {
    generate_outlier_raw(cfg, rng).to_stamp()
}

/// Generator for stamp `index` of the inlier (`outlier = false`) or outlier
/// stream.
pub fn stamp_rng(seed: u64, outlier: bool, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(outlier) << 32) | index as u64);
    rng
}

fn generate_range(cfg: &SynthConfig, outlier: bool, range: std::ops::Range<usize>) -> Result<Vec<Stamp<f32>>> {
    range
        .into_par_iter()
        .map(|i| {
            let mut rng = stamp_rng(cfg.seed, outlier, i);
            if outlier {
                generate_outlier(cfg, &mut rng)
            } else {
                generate_inlier(cfg, &mut rng)
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: StampDataset<f32>,
    pub validation: StampDataset<f32>,
    /// Inliers first, then outliers; labels set.
    pub test: StampDataset<f32>,
}

/// Inlier stream indices `0..train` go to train, the next `validation` to
/// validation and the next `n_outliers` to test, followed by outlier stream
/// indices `0..n_outliers`.
pub fn generate_benchmark(cfg: &SynthConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let (tr, va, te) = (cfg.train, cfg.validation, cfg.test_inliers());
    let train = generate_range(cfg, false, 0..tr)?;
    let validation = generate_range(cfg, false, tr..tr + va)?;
    let mut test = generate_range(cfg, false, tr + va..tr + va + te)?;
    test.extend(generate_range(cfg, true, 0..cfg.n_outliers)?);
    let labels = std::iter::repeat_n(Label::Inlier, te)
        .chain(std::iter::repeat_n(Label::Outlier, cfg.n_outliers))
        .collect();
    Ok(Benchmark {
        train: StampDataset::inliers(train, Split::Train)?,
        validation: StampDataset::inliers(validation, Split::Validation)?,
        test: StampDataset::new(test, Some(labels), Some(Split::Test))?,
    })
}

/// Hand-written baseline: negated maximum absolute Laplacian-of-Gaussian
/// response of the difference channel (channel 2). Higher means more
/// inlier-like, matching the normality score's orientation.
pub fn laplacian_oracle_score(s: &Stamp<f32>) -> Result<f64> {
    let k = laplacian_kernel::<f32>();
    let resp = convolve_2d(s.channel(2), s.height(), s.width(), &k)?;
    Ok(-resp.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_centred_difference_is_gaussian() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            jitter: 0.0,
            ..Default::default()
        };
        let mut rng = stamp_rng(1, false, 0);
        let raw = generate_inlier_raw(&cfg, &mut rng);
        let d = raw.difference();
        let peak = d[10 * 21 + 10];
        // recover sigma from the neighbour ratio and compare every pixel
        let s2 = -1.0 / (2.0 * (d[10 * 21 + 11] / peak).ln());
        for r in 0..21 {
            for c in 0..21 {
                let rr = ((r as f64 - 10.0).powi(2) + (c as f64 - 10.0).powi(2)) / 2.0;
                let want = peak * (-rr / s2).exp();
                assert!((d[r * 21 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig::hits_scale().validate().is_ok());
        let bad = SynthConfig {
            artifact_mix: [0.5, 0.5, 0.5, 0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            n_inliers: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            channels: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn substreams_are_independent_of_order() {
        let cfg = SynthConfig::default();
        let a = generate_inlier(&cfg, &mut stamp_rng(3, false, 17)).unwrap();
        let _ = generate_inlier(&cfg, &mut stamp_rng(3, false, 16)).unwrap();
        let b = generate_inlier(&cfg, &mut stamp_rng(3, false, 17)).unwrap();
        assert_eq!(a, b);
        let c = generate_inlier(&cfg, &mut stamp_rng(3, true, 17)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn four_channel_mode_adds_snr_plane() {
        let cfg = SynthConfig {
            channels: 4,
            ..Default::default()
        };
        let raw = generate_outlier_raw(&cfg, &mut stamp_rng(0, true, 0));
        assert_eq!(raw.planes.len(), 4);
        for (d, s) in raw.planes[2].iter().zip(&raw.planes[3]) {
            assert!((d / cfg.noise_sigma - s).abs() < 1e-12);
        }
    }
}
