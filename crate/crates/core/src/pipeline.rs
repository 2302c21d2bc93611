//! Training and testing phases chained over one benchmark.

use crate::classifier::{build_self_labeled, train, ClassifierConfig, ClassifierModel};
use crate::dirichlet::{fit_scorer, fit_threshold, normality_scores, DirichletScorer, ScoreRow};
use crate::error::{Error, Result};
use crate::eval::{RunResult, ScoredSample};
use crate::stamps::{Label, StampDataset};
use crate::synth::{laplacian_oracle_score, Benchmark};
use crate::transforms::TransformSet;

/// A trained classifier with its fitted scorer (threshold included).
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: ClassifierModel<f32>,
    pub scorer: DirichletScorer,
}

/// Trains on the self-labeled train split, fits the Dirichlet scorer on the
/// same training inliers and the threshold on the validation inliers.
/// `cfg.n_classes` is overridden by the catalog size.
pub fn train_detector(
    train_inliers: &StampDataset<f32>,
    validation_inliers: &StampDataset<f32>,
    catalog: &TransformSet,
    cfg: &ClassifierConfig,
) -> Result<Detector> {
    let cfg = ClassifierConfig {
        n_classes: catalog.len(),
        ..cfg.clone()
    };
    let tr = build_self_labeled(train_inliers, catalog)?;
    let va = build_self_labeled(validation_inliers, catalog)?;
    let model = train(&tr, &va, &cfg)?;
    let mut scorer = fit_scorer(&model, &train_inliers.stamps, catalog)?;
    fit_threshold(&mut scorer, &validation_inliers.stamps, &model, catalog)?;
    Ok(Detector { model, scorer })
}

impl Detector {
    pub fn score_rows(&self, catalog: &TransformSet, data: &StampDataset<f32>) -> Result<Vec<ScoreRow>> {
        let lambda = self.scorer.lambda.ok_or_else(|| {
            Error::InvalidConfig("scorer has no threshold; fit it on validation inliers first".into())
        })?;
        let scores = normality_scores(&self.scorer, &self.model, catalog, &data.stamps)?;
        Ok(scores
            .into_iter()
            .enumerate()
            .map(|(sample_index, normality_score)| ScoreRow {
                sample_index,
                normality_score,
                predicted_label: u8::from(normality_score >= lambda),
            })
            .collect())
    }
}

/// Pairs score rows with the dataset's ground truth.
pub fn run_result(
    rows: &[ScoreRow],
    truth: &StampDataset<f32>,
    lambda: f64,
    fingerprint: String,
    seed: u64,
) -> Result<RunResult> {
    let labels = truth
        .labels
        .as_ref()
        .ok_or_else(|| Error::Malformed("evaluation needs a labeled dataset".into()))?;
    if labels.len() != rows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labeled samples",
            rows.len(),
            labels.len()
        )));
    }
    let scores = rows
        .iter()
        .map(|r| {
            let label = labels.get(r.sample_index).ok_or_else(|| {
                Error::ShapeMismatch(format!(
                    "sample index {} outside the {} labeled samples",
                    r.sample_index,
                    labels.len()
                ))
            })?;
            Ok(ScoredSample {
                id: r.sample_index,
                score: r.normality_score,
                label: u8::from(*label == Label::Inlier),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RunResult::from_scores(scores, lambda, fingerprint, seed)
}

#[derive(Clone, Debug)]
pub struct DetectionRun {
    pub detector: Detector,
    pub rows: Vec<ScoreRow>,
    pub result: RunResult,
}

/// Train, fit, threshold and score the test split of one benchmark.
pub fn run_detection(
    bench: &Benchmark,
    catalog: &TransformSet,
    cfg: &ClassifierConfig,
    fingerprint: String,
) -> Result<DetectionRun> {
    let detector = train_detector(&bench.train, &bench.validation, catalog, cfg)?;
    let rows = detector.score_rows(catalog, &bench.test)?;
    let lambda = detector.scorer.lambda.unwrap_or(f64::NEG_INFINITY);
    let result = run_result(&rows, &bench.test, lambda, fingerprint, cfg.seed)?;
    Ok(DetectionRun { detector, rows, result })
}

/// Test AUROC of the Laplacian-response baseline.
pub fn oracle_auroc(test: &StampDataset<f32>) -> Result<f64> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Malformed("evaluation needs a labeled dataset".into()))?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, l) in test.stamps.iter().zip(labels) {
        let v = laplacian_oracle_score(s)?;
        if l.is_inlier() {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    crate::eval::auroc(&pos, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::synth::{generate_benchmark, SynthConfig};
    use crate::transforms::build_catalog;

    fn tiny() -> Benchmark {
        generate_benchmark(&SynthConfig {
            n_inliers: 260,
            n_outliers: 60,
            train: 120,
            validation: 80,
            side: 15,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn rows_follow_the_threshold() {
        let b = tiny();
        let cat = build_catalog("shifts9").unwrap();
        let cfg = ClassifierConfig {
            architecture: Architecture::LinearSoftmax,
            max_epochs: 2,
            ..Default::default()
        };
        let run = run_detection(&b, &cat, &cfg, "fp".into()).unwrap();
        let lambda = run.detector.scorer.lambda.unwrap();
        assert_eq!(run.rows.len(), 120);
        for (i, r) in run.rows.iter().enumerate() {
            assert_eq!(r.sample_index, i);
            assert_eq!(r.predicted_label == 1, r.normality_score >= lambda);
        }
        assert_eq!(run.result.lambda, lambda);
        assert!((0.0..=1.0).contains(&run.result.auroc));
    }

    #[test]
    fn run_result_needs_matching_labels() {
        let b = tiny();
        let rows = vec![ScoreRow {
            sample_index: 0,
            normality_score: 1.0,
            predicted_label: 1,
        }];
        assert!(matches!(
            run_result(&rows, &b.test, 0.0, String::new(), 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(run_result(&rows, &b.train, 0.0, String::new(), 0).is_err());
    }
}
