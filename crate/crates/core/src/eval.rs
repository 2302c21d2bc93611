//! Detection metrics and run statistics.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

fn check_scores(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty(format!("{name} scores")));
    }
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{name} score {x}")));
    }
    Ok(())
}

/// Area under the ROC curve for "higher score = positive".
///
/// Computed as the normalized Mann-Whitney rank sum with mid-ranks, i.e.
/// `P(pos > neg) + 0.5 * P(pos == neg)`.
pub fn auroc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    check_scores("positive", scores_pos)?;
    check_scores("negative", scores_neg)?;
    let mut all: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores_neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum_pos += mid_rank * pos_in_tie as f64;
        i = j + 1;
    }
    let (np, nn) = (scores_pos.len() as f64, scores_neg.len() as f64);
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Exact AUROC as a rational number of half-credited pair comparisons.
pub fn auroc_exact(scores_pos: &[f64], scores_neg: &[f64]) -> Result<Ratio<u64>> {
    check_scores("positive", scores_pos)?;
    check_scores("negative", scores_neg)?;
    let mut neg = scores_neg.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut twice_favorable: u64 = 0;
    for &p in scores_pos {
        let below = neg.partition_point(|&n| n < p) as u64;
        let not_above = neg.partition_point(|&n| n <= p) as u64;
        twice_favorable += 2 * below + (not_above - below);
    }
    let denom = 2 * scores_pos.len() as u64 * scores_neg.len() as u64;
    Ok(Ratio::new(twice_favorable, denom))
}

/// Fraction of samples where `score >= lambda` agrees with `label` (1 = inlier).
pub fn accuracy_at_threshold(scores: &[(f64, u8)], lambda: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .filter(|&&(s, label)| (s >= lambda) == (label == 1))
        .count();
    correct as f64 / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    for (name, xs) in [("a", a), ("b", b)] {
        if xs.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: xs.len(),
            });
        }
        check_scores(name, xs)?;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchTest {
        t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, var) = mean_var(xs);
        MeanSd {
            mean,
            sd: var.sqrt(),
            n: xs.len(),
        }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.sd)
    }
}

/// Formats a p-value with two significant figures.
pub fn format_p_value(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    if p >= 1e-3 {
        let digits = (1 - p.log10().floor() as i32).max(0) as usize;
        format!("{p:.digits$}")
    } else {
        format!("{p:.1e}")
    }
}

/// One scored sample: identifier, normality score and ground truth (1 = inlier).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scores: Vec<ScoredSample>,
    pub auroc: f64,
    pub accuracy: f64,
    pub lambda: f64,
    pub fingerprint: String,
    pub seed: u64,
}

impl RunResult {
    pub fn from_scores(scores: Vec<ScoredSample>, lambda: f64, fingerprint: String, seed: u64) -> Result<Self> {
        let pos: Vec<f64> = scores.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
        let auroc = auroc(&pos, &neg)?;
        let pairs: Vec<(f64, u8)> = scores.iter().map(|s| (s.score, s.label)).collect();
        let accuracy = accuracy_at_threshold(&pairs, lambda);
        Ok(RunResult {
            scores,
            auroc,
            accuracy,
            lambda,
            fingerprint,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub catalog: String,
    pub auroc: MeanSd,
    pub accuracy: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchRow {
    pub catalog_a: String,
    pub catalog_b: String,
    pub metric: String,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
}

/// Per-catalog mean ± sd and the Welch rows for each comparison.
pub fn summarize(
    labels: &[String],
    runs: &[Vec<RunResult>],
    comparisons: &[(usize, usize)],
) -> (Vec<CatalogSummary>, Vec<WelchRow>) {
    let auroc = |rs: &[RunResult]| rs.iter().map(|r| r.auroc).collect::<Vec<_>>();
    let accuracy = |rs: &[RunResult]| rs.iter().map(|r| r.accuracy).collect::<Vec<_>>();
    let summaries = labels
        .iter()
        .zip(runs)
        .map(|(l, rs)| CatalogSummary {
            catalog: l.clone(),
            auroc: MeanSd::of(&auroc(rs)),
            accuracy: MeanSd::of(&accuracy(rs)),
        })
        .collect();
    let mut welch = Vec::new();
    for &(a, b) in comparisons {
        for (metric, get) in [
            ("auroc", &auroc as &dyn Fn(&[RunResult]) -> Vec<f64>),
            ("accuracy", &accuracy),
        ] {
            let test = welch_t_test(&get(&runs[a]), &get(&runs[b])).ok();
            welch.push(WelchRow {
                catalog_a: labels[a].clone(),
                catalog_b: labels[b].clone(),
                metric: metric.into(),
                t: test.map(|w| w.t),
                df: test.map(|w| w.df),
                p_value: test.map(|w| w.p_value),
            });
        }
    }
    (summaries, welch)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn summary_csv(s: &[CatalogSummary]) -> String {
    let mut out = String::from("catalog,runs,auroc_mean,auroc_sd,accuracy_mean,accuracy_sd\n");
    for r in s {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            r.catalog, r.auroc.n, r.auroc.mean, r.auroc.sd, r.accuracy.mean, r.accuracy.sd
        );
    }
    out
}

pub fn welch_csv(w: &[WelchRow]) -> String {
    let mut out = String::from("catalog_a,catalog_b,metric,t,df,p_value\n");
    for r in w {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.catalog_a,
            r.catalog_b,
            r.metric,
            opt(r.t),
            opt(r.df),
            opt(r.p_value)
        );
    }
    out
}

/// Markdown table: one row per catalog (percentages, mean±sd), then one
/// Welch p-value row per comparison.
pub fn render_table(s: &[CatalogSummary], w: &[WelchRow]) -> String {
    let mut out = String::from("| catalog | runs | AUROC (%) | accuracy (%) |\n|---|---|---|---|\n");
    for r in s {
        let _ = writeln!(out, "| {} | {} | {} | {} |", r.catalog, r.auroc.n, r.auroc, r.accuracy);
    }
    let p = |r: Option<&WelchRow>| {
        r.and_then(|r| r.p_value)
            .map(format_p_value)
            .unwrap_or_else(|| "n/a".into())
    };
    for pair in w.chunks(2) {
        let (auroc, acc) = (
            pair.iter().find(|r| r.metric == "auroc"),
            pair.iter().find(|r| r.metric == "accuracy"),
        );
        let first = &pair[0];
        let _ = writeln!(
            out,
            "| Welch's t-test p-value ({}) v/s ({}) | | {} | {} |",
            first.catalog_a,
            first.catalog_b,
            p(auroc),
            p(acc)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(pos: &[f64], neg: &[f64]) -> f64 {
        let mut fav = 0.0;
        for p in pos {
            for n in neg {
                fav += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        fav / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        let a = auroc(&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((a - 3.0 / 9.0).abs() < 1e-15);
        assert_eq!(
            auroc_exact(&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]).unwrap(),
            Ratio::new(1, 3)
        );
    }

    #[test]
    fn auroc_rejects_empty_class() {
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Empty(_))));
        assert!(auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let perfect = [(2.0, 1), (3.0, 1), (-1.0, 0), (0.0, 0)];
        assert_eq!(accuracy_at_threshold(&perfect, 1.0), 1.0);
        assert_eq!(accuracy_at_threshold(&perfect, f64::NEG_INFINITY), 0.5);
        // errors: 0.5 labelled inlier but below, 1.5 outlier above
        let hand = [(2.0, 1), (0.5, 1), (3.0, 1), (-1.0, 0), (1.5, 0), (0.0, 0)];
        assert!((accuracy_at_threshold(&hand, 1.0) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let w = welch_t_test(&a, &a).unwrap();
        assert_eq!(w.t, 0.0);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn welch_separated_samples() {
        let a = [0.0, 1e-9, -1e-9, 0.5e-9];
        let b = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 0.5e-9];
        assert!(welch_t_test(&a, &b).unwrap().p_value < 1e-6);
        assert!(matches!(
            welch_t_test(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            welch_t_test(&[0.0], &[1.0, 2.0]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn welch_reference_value() {
        // equal variances and sizes: t = -1, df = 8
        let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((w.t + 1.0).abs() < 1e-12);
        assert!((w.df - 8.0).abs() < 1e-12);
        // reference value from an independent t-distribution implementation
        assert!((w.p_value - 0.346_593_507).abs() < 1e-6, "{}", w.p_value);
    }

    #[test]
    fn p_value_formatting() {
        assert_eq!(format_p_value(0.34659), "0.35");
        assert_eq!(format_p_value(0.0029), "0.0029");
        assert_eq!(format_p_value(0.000_29), "2.9e-4");
        assert_eq!(format_p_value(0.012), "0.012");
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_enumeration(
            pos in proptest::collection::vec(0i32..8, 1..30),
            neg in proptest::collection::vec(0i32..8, 1..30),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let a = auroc(&pos, &neg).unwrap();
            prop_assert!((a - brute(&pos, &neg)).abs() < 1e-12);
            let exact = auroc_exact(&pos, &neg).unwrap();
            prop_assert!((a - *exact.numer() as f64 / *exact.denom() as f64).abs() < 1e-12);
            let swapped = auroc_exact(&neg, &pos).unwrap();
            prop_assert_eq!(exact + swapped, Ratio::from_integer(1));
            let warped: Vec<f64> = pos.iter().map(|x| (x * 0.37).exp()).collect();
            let warped_neg: Vec<f64> = neg.iter().map(|x| (x * 0.37).exp()).collect();
            prop_assert_eq!(auroc_exact(&warped, &warped_neg).unwrap(), exact);
        }

        #[test]
        fn welch_is_antisymmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 2..12),
            b in proptest::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            if let (Ok(ab), Ok(ba)) = (welch_t_test(&a, &b), welch_t_test(&b, &a)) {
                prop_assert!((ab.t + ba.t).abs() < 1e-12);
                prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            }
        }

        #[test]
        fn accuracy_only_changes_at_observed_scores(
            scores in proptest::collection::vec((-10.0f64..10.0, 0u8..2), 1..20),
            lo in -12.0f64..12.0,
            hi in -12.0f64..12.0,
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            // no observed score in [lo, hi) -> identical accuracy
            if !scores.iter().any(|&(s, _)| s >= lo && s < hi) {
                prop_assert_eq!(accuracy_at_threshold(&scores, lo), accuracy_at_threshold(&scores, hi));
            }
        }
    }

    fn run(auroc: f64, accuracy: f64) -> RunResult {
        RunResult {
            scores: vec![ScoredSample {
                id: 0,
                score: 0.0,
                label: 1,
            }],
            auroc,
            accuracy,
            lambda: 0.0,
            fingerprint: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn table_has_one_welch_row_per_comparison() {
        let labels = vec!["geo72".to_string(), "geo99".to_string()];
        let runs = vec![
            vec![run(0.90, 0.80), run(0.92, 0.82), run(0.91, 0.81)],
            vec![run(0.95, 0.85), run(0.96, 0.86), run(0.97, 0.84)],
        ];
        let (s, w) = summarize(&labels, &runs, &[(0, 1)]);
        assert_eq!(w.len(), 2);
        assert!((s[0].auroc.mean - 0.91).abs() < 1e-12);
        let t = render_table(&s, &w);
        assert!(t.contains("| geo72 | 3 | 91.00±1.00 |"), "{t}");
        let row = t
            .lines()
            .find(|l| l.contains("Welch's t-test p-value (geo72) v/s (geo99)"))
            .unwrap();
        let p = welch_t_test(&[0.90, 0.92, 0.91], &[0.95, 0.96, 0.97]).unwrap().p_value;
        assert!(row.contains(&format_p_value(p)), "{row}");
        assert!(welch_csv(&w).lines().nth(1).unwrap().starts_with("geo72,geo99,auroc,"));
    }

    #[test]
    fn single_run_comparisons_print_na() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let runs = vec![vec![run(0.9, 0.8)], vec![run(0.8, 0.7)]];
        let (s, w) = summarize(&labels, &runs, &[(0, 1)]);
        assert!(w.iter().all(|r| r.p_value.is_none()));
        assert!(render_table(&s, &w).contains("| n/a | n/a |"));
        assert!(welch_csv(&w).contains("a,b,auroc,,,\n"));
    }
}
