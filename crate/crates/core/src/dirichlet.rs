//! Dirichlet maximum-likelihood fits of classifier outputs and the normality
//! score built from them.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::{write_atomic, Stamp};
use crate::transforms::{TransformSet, Transformer};

/// Probabilities are clipped to `[CLIP_EPS, 1 - CLIP_EPS]` and renormalized
/// before any log is taken.
pub const CLIP_EPS: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 1000;
pub const TOLERANCE: f64 = 1e-8;
/// Fraction of validation inliers kept above the threshold is `1 - 0.023`.
pub const THRESHOLD_PERCENTILE: f64 = 2.3;
pub const MIN_THRESHOLD_SAMPLES: usize = 50;

/// Starting precision when every sample is identical; the likelihood then
/// grows without bound along `alpha = s * p`, so any large `s` is as good as
/// another and the fixed point settles immediately.
const DEGENERATE_PRECISION: f64 = 1e9;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma function for `x > 0` (recurrence to `x >= 10`, then the
/// asymptotic series).
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    let series = f
        * (1.0 / 12.0
            - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f * (1.0 / 132.0 - f * (691.0 / 32760.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma function for `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    let series = 1.0 / x
        + f / 2.0
        + f / x * (1.0 / 6.0 - f * (1.0 / 30.0 - f * (1.0 / 42.0 - f * (1.0 / 30.0 - f * (5.0 / 66.0)))));
    acc + series
}

/// Solves `digamma(x) = y` by Newton's method.
pub fn inv_digamma(y: f64) -> f64 {
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + EULER_GAMMA)
    };
    for _ in 0..50 {
        let step = (digamma(x) - y) / trigamma(x);
        let mut next = x - step;
        if next <= 0.0 {
            next = x / 2.0;
        }
        let done = (next - x).abs() <= 1e-15 * next;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Clips to `[CLIP_EPS, 1 - CLIP_EPS]` and renormalizes.
pub fn clip_probabilities(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("probability entry {v}")));
    }
    let mut q: Vec<f64> = p.iter().map(|v| v.clamp(CLIP_EPS, 1.0 - CLIP_EPS)).collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    Ok(q)
}

/// Mean Dirichlet log-density given the per-coordinate mean log sample.
pub fn mean_log_likelihood(alpha: &[f64], mean_log_p: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    ln_gamma(s) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + alpha.iter().zip(mean_log_p).map(|(a, l)| (a - 1.0) * l).sum::<f64>()
}

/// Result of one MLE fit.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletFit {
    pub alpha: Vec<f64>,
    pub iterations: usize,
    /// Last `max_j |delta alpha_j| / alpha_j` of the plain fixed-point map.
    pub residual: f64,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
}

/// Maximum-likelihood Dirichlet parameters of `samples`.
pub fn fit_dirichlet_mle(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    fit_dirichlet(samples).map(|f| f.alpha)
}

/// Like [`fit_dirichlet_mle`] with iteration diagnostics.
///
/// The update is the fixed point `psi(alpha_j) = psi(sum alpha) + mean log
/// p_j`. Plain iteration crawls when the outputs are confident (tens of
/// thousands of steps), so each outer step applies the map twice,
/// extrapolates along the two steps in log space (SQUAREM), and maps the
/// extrapolated point once more. That point is kept only if its likelihood is
/// at least that of the plain double step, so the iteration stays monotone
/// and has the same fixed point as the plain map.
pub fn fit_dirichlet(samples: &[Vec<f64>]) -> Result<DirichletFit> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let k = samples[0].len();
    if k < 1 {
        return Err(Error::Empty("probability vectors have no entries".into()));
    }
    let mut mean = vec![0.0; k];
    let mut mean_sq = vec![0.0; k];
    let mut mean_log = vec![0.0; k];
    let mut first: Option<Vec<f64>> = None;
    let mut identical = true;
    for s in samples {
        if s.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "probability vectors of length {k} and {}",
                s.len()
            )));
        }
        let q = clip_probabilities(s)?;
        for j in 0..k {
            mean[j] += q[j];
            mean_sq[j] += q[j] * q[j];
            mean_log[j] += q[j].ln();
        }
        match &first {
            None => first = Some(q),
            Some(f) => identical &= *f == q,
        }
    }
    let n = samples.len() as f64;
    for j in 0..k {
        mean[j] /= n;
        mean_sq[j] /= n;
        mean_log[j] /= n;
    }

    let init = if identical {
        mean.iter().map(|m| m * DEGENERATE_PRECISION).collect()
    } else {
        moment_match(&mean, &mean_sq)
    };
    let initial_log_likelihood = mean_log_likelihood(&init, &mean_log);
    let map = |a: &[f64]| -> Vec<f64> {
        let base = digamma(a.iter().sum());
        mean_log.iter().map(|&l| inv_digamma(base + l)).collect()
    };
    let rel = |new: &[f64], old: &[f64]| new.iter().zip(old).map(|(n, o)| (n - o).abs() / o).fold(0.0, f64::max);

    let mut alpha = init;
    let mut residual = f64::INFINITY;
    let mut max_step = 1.0;
    for it in 1..=MAX_ITERATIONS {
        let a1 = map(&alpha);
        residual = rel(&a1, &alpha);
        if !residual.is_finite() {
            return Err(Error::NonFinite(format!("dirichlet iterate at step {it}")));
        }
        if residual < TOLERANCE {
            let log_likelihood = mean_log_likelihood(&a1, &mean_log);
            return Ok(DirichletFit {
                alpha: a1,
                iterations: it,
                residual,
                log_likelihood,
                initial_log_likelihood,
            });
        }
        let a2 = map(&a1);
        match extrapolate(&alpha, &a1, &a2, max_step).map(|(c, capped)| (map(&c), capped)) {
            Some((cand, capped))
                if cand.iter().all(|a| a.is_finite() && *a > 0.0)
                    && mean_log_likelihood(&cand, &mean_log) >= mean_log_likelihood(&a2, &mean_log) =>
            {
                alpha = cand;
                if capped {
                    max_step *= 4.0;
                }
            }
            _ => {
                alpha = a2;
                max_step = (max_step / 4.0).max(1.0);
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

fn moment_match(mean: &[f64], mean_sq: &[f64]) -> Vec<f64> {
    let var = mean_sq[0] - mean[0] * mean[0];
    let s = (mean[0] - mean_sq[0]) / var;
    let alpha: Vec<f64> = mean.iter().map(|m| m * s).collect();
    if alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
        alpha
    } else {
        vec![1.0; mean.len()]
    }
}

/// SQUAREM extrapolation from `x0` through `x1 = F(x0)`, `x2 = F(x1)` in log
/// coordinates, with the step length capped at `max_step`.
fn extrapolate(x0: &[f64], x1: &[f64], x2: &[f64], max_step: f64) -> Option<(Vec<f64>, bool)> {
    let (mut rr, mut vv) = (0.0, 0.0);
    let mut r = Vec::with_capacity(x0.len());
    let mut v = Vec::with_capacity(x0.len());
    for j in 0..x0.len() {
        let (l0, l1, l2) = (x0[j].ln(), x1[j].ln(), x2[j].ln());
        r.push(l1 - l0);
        v.push(l2 - 2.0 * l1 + l0);
        rr += r[j] * r[j];
        vv += v[j] * v[j];
    }
    let step = if vv > 0.0 {
        (rr / vv).sqrt().clamp(1.0, max_step)
    } else {
        max_step
    };
    let cand: Vec<f64> = (0..x0.len())
        .map(|j| (x0[j].ln() + 2.0 * step * r[j] + step * step * v[j]).exp())
        .collect();
    let capped = step >= max_step;
    cand.iter().all(|a| a.is_finite() && *a > 0.0).then_some((cand, capped))
}

/// Fitted per-transformation Dirichlet parameters and the decision threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletScorer {
    pub catalog_name: String,
    /// `alpha[i]` is fitted on outputs for transformation `i`.
    pub alpha: Vec<Vec<f64>>,
    pub lambda: Option<f64>,
}

impl DirichletScorer {
    pub fn new(catalog_name: impl Into<String>, alpha: Vec<Vec<f64>>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 {
            return Err(Error::Empty("scorer needs at least one parameter vector".into()));
        }
        for (i, a) in alpha.iter().enumerate() {
            if a.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "alpha[{i}] has {} entries, expected {k}",
                    a.len()
                )));
            }
            if let Some(v) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::NonFinite(format!(
                    "alpha[{i}] entry {v} is not a positive number"
                )));
            }
        }
        Ok(DirichletScorer {
            catalog_name: catalog_name.into(),
            alpha,
            lambda: None,
        })
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, catalog: &TransformSet, classes: usize) -> Result<()> {
        if catalog.len() != self.k() || classes != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "scorer has k={}, catalog {} has {} transformations, classifier has {classes} classes",
                self.k(),
                catalog.name(),
                catalog.len()
            )));
        }
        Ok(())
    }

    /// Normality score from the softmax outputs `y[i] = y(T_i(x))`.
    pub fn score_outputs(&self, y: &[Vec<f64>]) -> Result<f64> {
        if y.len() != self.k() {
            return Err(Error::ShapeMismatch(format!("{} outputs for k={}", y.len(), self.k())));
        }
        let mut total = 0.0;
        for (a, p) in self.alpha.iter().zip(y) {
            if p.len() != a.len() {
                return Err(Error::ShapeMismatch(format!(
                    "output of length {} for k={}",
                    p.len(),
                    a.len()
                )));
            }
            let q = clip_probabilities(p)?;
            total += a.iter().zip(&q).map(|(ai, qi)| (ai - 1.0) * qi.ln()).sum::<f64>();
        }
        Ok(total / self.k() as f64)
    }

    /// Mean full Dirichlet log-density over transformations (diagnostic
    /// only; differs from the normality score by the normalizing constants).
    pub fn log_likelihood_outputs(&self, y: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (a, p) in self.alpha.iter().zip(y) {
            let q = clip_probabilities(p)?;
            let logs: Vec<f64> = q.iter().map(|v| v.ln()).collect();
            total += mean_log_likelihood(a, &logs);
        }
        Ok(total / self.k() as f64)
    }

    /// `1` (inlier) when `score >= lambda`.
    pub fn predict_label(&self, score: f64) -> Option<u8> {
        self.lambda.map(|l| u8::from(score >= l))
    }
}

/// Softmax outputs for every transformation of every stamp:
/// `out[n][i] = y(T_i(x_n))`. Work is split into fixed chunks so results do
/// not depend on the thread count.
pub fn transformed_outputs<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    stamps: &[Stamp<T>],
    catalog: &TransformSet,
) -> Result<Vec<Vec<Vec<f64>>>> {
    const CHUNK: usize = 64;
    let tr = Transformer::<T>::default();
    let chunks: Vec<Result<Vec<Vec<Vec<f64>>>>> = stamps
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut per_stamp = vec![Vec::with_capacity(catalog.len()); chunk.len()];
            for spec in catalog.specs() {
                let batch = chunk.iter().map(|s| tr.apply(spec, s)).collect::<Result<Vec<_>>>()?;
                for (slot, y) in model.predict_softmax(&batch)?.into_iter().enumerate() {
                    per_stamp[slot].push(y);
                }
            }
            Ok(per_stamp)
        })
        .collect();
    let mut out = Vec::with_capacity(stamps.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fits one Dirichlet per transformation on the classifier's outputs over all
/// transformed training inliers.
pub fn fit_scorer<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    train_inliers: &[Stamp<T>],
    catalog: &TransformSet,
) -> Result<DirichletScorer> {
    if model.n_classes() != catalog.len() {
        return Err(Error::ShapeMismatch(format!(
            "classifier has {} classes, catalog {} has {} transformations",
            model.n_classes(),
            catalog.name(),
            catalog.len()
        )));
    }
    let outputs = transformed_outputs(model, train_inliers, catalog)?;
    fit_scorer_from_outputs(catalog.name(), &outputs)
}

/// [`fit_scorer`] from precomputed `outputs[n][i]`.
pub fn fit_scorer_from_outputs(catalog_name: &str, outputs: &[Vec<Vec<f64>>]) -> Result<DirichletScorer> {
    let k = outputs.first().map_or(0, Vec::len);
    let alpha = (0..k)
        .into_par_iter()
        .map(|i| {
            let samples: Vec<Vec<f64>> = outputs.iter().map(|o| o[i].clone()).collect();
            fit_dirichlet_mle(&samples)
        })
        .collect::<Result<Vec<_>>>()?;
    DirichletScorer::new(catalog_name, alpha)
}

pub fn normality_score<T: Scalar, C: Classifier<T> + ?Sized>(
    scorer: &DirichletScorer,
    model: &C,
    catalog: &TransformSet,
    x: &Stamp<T>,
) -> Result<f64> {
    Ok(normality_scores(scorer, model, catalog, std::slice::from_ref(x))?[0])
}

pub fn normality_scores<T: Scalar, C: Classifier<T> + ?Sized>(
    scorer: &DirichletScorer,
    model: &C,
    catalog: &TransformSet,
    stamps: &[Stamp<T>],
) -> Result<Vec<f64>> {
    scorer.check(catalog, model.n_classes())?;
    transformed_outputs(model, stamps, catalog)?
        .iter()
        .map(|y| scorer.score_outputs(y))
        .collect()
}

/// Percentile with linear interpolation between order statistics (position
/// `(n - 1) * q / 100` in the sorted sample).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Threshold at the 2.3rd percentile of validation-inlier scores.
pub fn threshold_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.len() < MIN_THRESHOLD_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_THRESHOLD_SAMPLES,
            got: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("validation score {s}")));
    }
    Ok(percentile(scores, THRESHOLD_PERCENTILE))
}

/// Scores the validation inliers and stores the resulting threshold.
pub fn fit_threshold<T: Scalar, C: Classifier<T> + ?Sized>(
    scorer: &mut DirichletScorer,
    validation_inliers: &[Stamp<T>],
    model: &C,
    catalog: &TransformSet,
) -> Result<f64> {
    let scores = normality_scores(scorer, model, catalog, validation_inliers)?;
    let lambda = threshold_from_scores(&scores)?;
    scorer.lambda = Some(lambda);
    Ok(lambda)
}

pub const GSDS_MAGIC: [u8; 4] = *b"GSDS";
pub const GSDS_VERSION: u16 = 1;

/// Layout (little-endian): `"GSDS" | version u16 | k u32 | name_len u32 |
/// name bytes | k*k f64 alpha (row i = transformation i) | f64 lambda`.
/// An unfitted threshold is stored as NaN.
pub fn write_scorer<W: Write>(s: &DirichletScorer, mut w: W) -> Result<()> {
    let name = s.catalog_name.as_bytes();
    let mut buf = Vec::with_capacity(22 + name.len() + 8 * s.k() * s.k());
    buf.extend_from_slice(&GSDS_MAGIC);
    buf.extend_from_slice(&GSDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    for row in &s.alpha {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&s.lambda.unwrap_or(f64::NAN).to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_scorer<R: Read>(mut r: R) -> Result<DirichletScorer> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Truncated {
                expected: n as u64,
                found: bytes.len() as u64,
            })
        } else {
            Ok(())
        }
    };
    need(14)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != GSDS_MAGIC {
        return Err(Error::BadMagic {
            expected: GSDS_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GSDS_VERSION {
        return Err(Error::VersionMismatch {
            expected: GSDS_VERSION,
            found: version,
        });
    }
    let k = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let name_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let total = k
        .checked_mul(k)
        .and_then(|kk| kk.checked_mul(8))
        .and_then(|b| b.checked_add(14 + 8))
        .and_then(|b| b.checked_add(name_len))
        .ok_or_else(|| Error::DimensionOverflow(format!("k={k}")))?;
    need(total)?;
    if bytes.len() > total {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after scorer",
            bytes.len() - total
        )));
    }
    let name = std::str::from_utf8(&bytes[14..14 + name_len])
        .map_err(|_| Error::Malformed("catalog name is not UTF-8".into()))?
        .to_string();
    let mut vals = bytes[14 + name_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let alpha: Vec<Vec<f64>> = (0..k).map(|_| vals.by_ref().take(k).collect()).collect();
    let lambda = vals.next().expect("length checked");
    let mut s = DirichletScorer::new(name, alpha)?;
    s.lambda = (!lambda.is_nan()).then_some(lambda);
    Ok(s)
}

pub fn write_scorer_file(s: &DirichletScorer, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_scorer(s, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

pub fn read_scorer_file(path: impl AsRef<Path>) -> Result<DirichletScorer> {
    read_scorer(std::fs::File::open(path)?)
}

/// One row of a score CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRow {
    pub sample_index: usize,
    pub normality_score: f64,
    pub predicted_label: u8,
}

pub const SCORE_CSV_HEADER: &str = "sample_index,normality_score,predicted_label";

/// Scores are written with Rust's shortest round-trip float formatting.
pub fn format_score_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::with_capacity(32 * (rows.len() + 1));
    s.push_str(SCORE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{}\n",
            r.sample_index, r.normality_score, r.predicted_label
        ));
    }
    s
}

pub fn parse_score_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCORE_CSV_HEADER => {}
        other => {
            return Err(Error::Malformed(format!(
                "score CSV header must be {SCORE_CSV_HEADER:?}, got {:?}",
                other.map(|(_, h)| h).unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Malformed(format!("score CSV line {}: {what}: {line:?}", n + 1));
        let mut f = line.split(',');
        let (Some(a), Some(b), Some(c), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad("expected 3 fields"));
        };
        let predicted_label = c
            .trim()
            .parse::<u8>()
            .ok()
            .filter(|v| *v <= 1)
            .ok_or_else(|| bad("label must be 0 or 1"))?;
        rows.push(ScoreRow {
            sample_index: a.trim().parse().map_err(|_| bad("bad sample index"))?,
            normality_score: b.trim().parse().map_err(|_| bad("bad score"))?,
            predicted_label,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    /// Dirichlet draws via normalized gamma variates.
    fn sample_dirichlet(alpha: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
        (0..n)
            .map(|_| {
                let x: Vec<f64> = g.iter().map(|d| d.sample(&mut rng)).collect();
                let s: f64 = x.iter().sum();
                x.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
        assert!((digamma(0.5) - (-EULER_GAMMA - 2.0 * 2f64.ln())).abs() < 1e-13);
        // psi(x + 1) = psi(x) + 1/x
        for &x in &[0.01, 0.3, 2.5, 17.0, 1e4] {
            assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() < 1e-12 * (1.0 + 1.0 / x));
        }
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.05, 0.7, 3.0, 40.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() < 1e-6 * trigamma(x));
        }
    }

    #[test]
    fn inverse_digamma_grid() {
        let mut y = -20.0;
        while y <= 20.0 {
            let x = inv_digamma(y);
            assert!((digamma(x) - y).abs() < 1e-10, "y={y} x={x}");
            y += 0.01;
        }
    }

    #[test]
    fn recovers_uniform_and_skewed_parameters() {
        for (alpha, tol) in [(vec![1.0, 1.0, 1.0], 0.03), (vec![5.0, 1.0, 0.5], 0.05)] {
            let fit = fit_dirichlet(&sample_dirichlet(&alpha, 50_000, 11)).unwrap();
            for (got, want) in fit.alpha.iter().zip(&alpha) {
                assert!((got - want).abs() / want < tol, "{:?} vs {alpha:?}", fit.alpha);
            }
            assert!(fit.log_likelihood >= fit.initial_log_likelihood);
        }
    }

    #[test]
    fn identical_samples_satisfy_fixed_point_equation() {
        let p = vec![0.2, 0.3, 0.5];
        let fit = fit_dirichlet(&[p.clone(), p.clone()]).unwrap();
        let s: f64 = fit.alpha.iter().sum();
        for (a, pj) in fit.alpha.iter().zip(&p) {
            assert!((digamma(*a) - digamma(s) - pj.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn concentrated_fits_converge() {
        let mut alpha = vec![0.05; 9];
        alpha[0] = 50.0;
        let fit = fit_dirichlet(&sample_dirichlet(&alpha, 2000, 5)).unwrap();
        assert!(fit.iterations < MAX_ITERATIONS);
        let s: f64 = fit.alpha.iter().sum();
        assert!(fit.alpha[0] / s > 0.9);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(
            fit_dirichlet(&[vec![0.5, 0.5]]),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            fit_dirichlet(&[vec![0.5, f64::NAN], vec![0.5, 0.5]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn identity_only_catalog_scores_zero() {
        let s = DirichletScorer::new("id", vec![vec![1.0]]).unwrap();
        assert_eq!(s.score_outputs(&[vec![1.0]]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_score() {
        let s = DirichletScorer::new("h", vec![vec![3.0, 0.5], vec![2.0, 4.0]]).unwrap();
        let y = vec![vec![0.8, 0.2], vec![0.25, 0.75]];
        let want = (2.0 * 0.8f64.ln() - 0.5 * 0.2f64.ln() + 1.0 * 0.25f64.ln() + 3.0 * 0.75f64.ln()) / 2.0;
        assert!((s.score_outputs(&y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_keeps_scores_finite() {
        let s = DirichletScorer::new("h", vec![vec![0.5, 3.0], vec![3.0, 0.5]]).unwrap();
        let v = s.score_outputs(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn threshold_on_grid() {
        let scores: Vec<f64> = (1..=1000).map(f64::from).collect();
        let lambda = threshold_from_scores(&scores).unwrap();
        assert!((lambda - 23.977).abs() < 1e-9);
        let kept = scores.iter().filter(|&&s| s >= lambda).count();
        assert!(kept as f64 / 1000.0 >= 0.977);
        assert_eq!(threshold_from_scores(&[4.5; 60]).unwrap(), 4.5);
        assert!(matches!(
            threshold_from_scores(&[1.0; 49]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn scorer_file_roundtrip_and_layout() {
        let mut s = DirichletScorer::new("geo9", vec![vec![1.5, 0.25], vec![0.75, 8.0]]).unwrap();
        s.lambda = Some(-3.25);
        let mut buf = Vec::new();
        write_scorer(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 4 + 4 + 4 + 4 * 8 + 8);
        assert_eq!(&buf[..4], b"GSDS");
        assert_eq!(f64::from_le_bytes(buf[18..26].try_into().unwrap()), 1.5);
        assert_eq!(read_scorer(&buf[..]).unwrap(), s);
        assert!(matches!(
            read_scorer(&buf[..buf.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        s.lambda = None;
        buf.clear();
        write_scorer(&s, &mut buf).unwrap();
        assert_eq!(read_scorer(&buf[..]).unwrap().lambda, None);
    }

    #[test]
    fn score_csv_roundtrip() {
        let rows = vec![
            ScoreRow {
                sample_index: 0,
                normality_score: -1.25,
                predicted_label: 1,
            },
            ScoreRow {
                sample_index: 1,
                normality_score: 0.1 + 0.2,
                predicted_label: 0,
            },
        ];
        let text = format_score_csv(&rows);
        assert!(text.starts_with("sample_index,normality_score,predicted_label\n0,-1.25,1\n"));
        assert_eq!(parse_score_csv(&text).unwrap(), rows);
        assert!(parse_score_csv("a,b,c\n").is_err());
    }

    proptest! {
        #[test]
        fn threshold_keeps_expected_fraction(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rand_distr::Normal::new(0.0, 3.0).unwrap();
            let scores: Vec<f64> = (0..1000).map(|_| d.sample(&mut rng)).collect();
            let lambda = threshold_from_scores(&scores).unwrap();
            let frac = scores.iter().filter(|&&s| s >= lambda).count() as f64 / 1000.0;
            prop_assert!((0.975..=0.98).contains(&frac));
        }

        #[test]
        fn score_is_order_free(perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let k = 4;
            let alpha: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0.1..5.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..k).map(|_| {
                let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            }).collect();
            let base = DirichletScorer::new("p", alpha.clone()).unwrap().score_outputs(&y).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            // relabel transformations: both the fit index and the class coordinates move
            let pa: Vec<Vec<f64>> = order.iter().map(|&i| order.iter().map(|&j| alpha[i][j]).collect()).collect();
            let py: Vec<Vec<f64>> = order.iter().map(|&i| order.iter().map(|&j| y[i][j]).collect()).collect();
            let permuted = DirichletScorer::new("p", pa).unwrap().score_outputs(&py).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12);
        }
    }
}
