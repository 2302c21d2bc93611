//! Pairwise discrimination matrix and redundant-transformation pruning.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train, Architecture, Classifier, ClassifierConfig, ClassifierModel, SelfLabeledDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::StampDataset;
use crate::transforms::{TransformSet, TransformSpec, Transformer};

/// Stored on the diagonal and for pairs whose training failed.
pub const SENTINEL: f64 = -1.0;
pub const DEFAULT_WINDOW: (f64, f64) = (0.49, 0.51);
pub const SUSPICIOUS_WINDOW: (f64, f64) = (0.45, 0.55);

/// Defaults for pair classifiers: compact network, 30 epochs, patience 0.
pub fn default_pair_config(seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        architecture: Architecture::CompactCnn,
        n_classes: 2,
        max_epochs: 30,
        patience: 0,
        seed,
        ..Default::default()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the classifier for pair `(i, j)`.
pub fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    mix(mix(mix(seed) ^ i as u64) ^ j as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    /// `i > j`.
    pub i: usize,
    pub j: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub train_size: usize,
    pub epochs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminationMatrix {
    pub catalog: TransformSet,
    /// Row-major `k x k`; symmetric, [`SENTINEL`] on the diagonal.
    pub accuracy: Vec<f64>,
    pub pairs: Vec<PairRecord>,
}

impl DiscriminationMatrix {
    /// Assembles a matrix from per-pair accuracies (`None` marks a failure).
    pub fn from_pairs(catalog: TransformSet, pairs: Vec<PairRecord>) -> Self {
        let k = catalog.len();
        let mut accuracy = vec![SENTINEL; k * k];
        for p in &pairs {
            let v = p.accuracy.unwrap_or(SENTINEL);
            accuracy[p.i * k + p.j] = v;
            accuracy[p.j * k + p.i] = v;
        }
        DiscriminationMatrix {
            catalog,
            accuracy,
            pairs,
        }
    }

    pub fn k(&self) -> usize {
        self.catalog.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.accuracy[i * self.k() + j]
    }

    pub fn failed_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .filter(|p| p.accuracy.is_none())
            .map(|p| (p.i, p.j))
            .collect()
    }

    /// Pairs with accuracy inside `[lo, hi]`, as `(i, j, acc)` with `i > j`.
    pub fn pairs_within(&self, (lo, hi): (f64, f64)) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 1..self.k() {
            for j in 0..i {
                let a = self.get(i, j);
                if a != SENTINEL && a >= lo && a <= hi {
                    out.push((i, j, a));
                }
            }
        }
        out
    }

    /// `k x k` CSV with a header row of transformation names.
    pub fn to_csv(&self) -> String {
        let k = self.k();
        let mut s = String::new();
        let names: Vec<String> = self.catalog.specs().iter().map(|t| format!("\"{t}\"")).collect();
        s.push_str(&names.join(","));
        s.push('\n');
        for i in 0..k {
            let row: Vec<String> = (0..k).map(|j| format!("{:?}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Balanced accuracy of a binary classifier separating `specs[0]` (label 0)
/// from `specs[1]` (label 1) on the transformed stamps. Ties go to label 0.
pub fn pair_accuracy<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    validation: &StampDataset<T>,
    specs: [TransformSpec; 2],
) -> Result<f64> {
    let tr = Transformer::<T>::default();
    let mut correct = [0usize; 2];
    for chunk in validation.stamps.chunks(256) {
        for (label, spec) in specs.iter().enumerate() {
            let batch = chunk.iter().map(|s| tr.apply(spec, s)).collect::<Result<Vec<_>>>()?;
            for p in model.predict_softmax(&batch)? {
                let predicted = usize::from(p[1] > p[0]);
                correct[label] += usize::from(predicted == label);
            }
        }
    }
    let n = validation.len() as f64;
    Ok(0.5 * (correct[0] as f64 / n + correct[1] as f64 / n))
}

fn run_pair<T: Scalar>(
    train_inliers: &StampDataset<T>,
    validation_inliers: &StampDataset<T>,
    evaluation_inliers: &StampDataset<T>,
    specs: [TransformSpec; 2],
    cfg: &ClassifierConfig,
) -> Result<(ClassifierModel<T>, f64, usize)> {
    let sld_train = SelfLabeledDataset::from_specs(train_inliers, &specs)?;
    let sld_val = SelfLabeledDataset::from_specs(validation_inliers, &specs)?;
    let model = train(&sld_train, &sld_val, cfg)?;
    let acc = pair_accuracy(&model, evaluation_inliers, specs)?;
    Ok((model, acc, sld_train.len()))
}

/// Trains one binary classifier per pair `i > j` and records its balanced
/// accuracy on the transformed validation inliers. Failed pairs are kept as
/// sentinels with their error message.
pub fn build_discrimination_matrix<T: Scalar>(
    train_inliers: &StampDataset<T>,
    validation_inliers: &StampDataset<T>,
    catalog: &TransformSet,
    cfg: &ClassifierConfig,
) -> Result<DiscriminationMatrix> {
    build_discrimination_matrix_on(train_inliers, validation_inliers, validation_inliers, catalog, cfg)
}

/// Like [`build_discrimination_matrix`], but accuracies are measured on
/// `evaluation_inliers` while `validation_inliers` only drives early
/// stopping. The standard error of a chance-level balanced accuracy is
/// about `0.35 / sqrt(n)`, so resolving a window of +-0.01 around 0.5 takes
/// several thousand evaluation stamps, far more than is affordable to
/// re-score every epoch.
pub fn build_discrimination_matrix_on<T: Scalar>(
    train_inliers: &StampDataset<T>,
    validation_inliers: &StampDataset<T>,
    evaluation_inliers: &StampDataset<T>,
    catalog: &TransformSet,
    cfg: &ClassifierConfig,
) -> Result<DiscriminationMatrix> {
    let k = catalog.len();
    if k < 2 {
        return Err(Error::InvalidCatalog(format!(
            "selection needs at least 2 transformations, {} has {k}",
            catalog.name()
        )));
    }
    if validation_inliers.is_empty() || evaluation_inliers.is_empty() {
        return Err(Error::Empty("validation inliers for pair accuracies".into()));
    }
    let cfg = ClassifierConfig {
        n_classes: 2,
        ..cfg.clone()
    };
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (1..k).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let pairs = jobs
        .par_iter()
        .map(|&(i, j)| {
            let seed = pair_seed(cfg.seed, i, j);
            let pair_cfg = ClassifierConfig { seed, ..cfg.clone() };
            match run_pair(
                train_inliers,
                validation_inliers,
                evaluation_inliers,
                [*catalog.get(j), *catalog.get(i)],
                &pair_cfg,
            ) {
                Ok((model, acc, size)) => PairRecord {
                    i,
                    j,
                    seed,
                    accuracy: Some(acc),
                    train_size: size,
                    epochs: model.metadata.epochs_run,
                    error: None,
                },
                Err(e) => PairRecord {
                    i,
                    j,
                    seed,
                    accuracy: None,
                    train_size: 2 * train_inliers.len(),
                    epochs: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(DiscriminationMatrix::from_pairs(catalog.clone(), pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub catalog: TransformSet,
    /// Original catalog indices of the survivors, in catalog order.
    pub survivors: Vec<usize>,
    /// Redundancy components with more than one member, each sorted.
    pub components: Vec<Vec<usize>>,
    pub window: (f64, f64),
}

/// Keeps one transformation per connected component of the graph whose edges
/// are the pairs with accuracy in `window`: the one with the fewest
/// operations, ties to the lowest index.
pub fn select_transformations(m: &DiscriminationMatrix, window: (f64, f64)) -> Result<Selection> {
    let k = m.k();
    for i in 1..k {
        for j in 0..i {
            if m.get(i, j) == SENTINEL {
                return Err(Error::IncompleteMatrix { i, j });
            }
        }
    }
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, j, _) in m.pairs_within(window) {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for x in 0..k {
        let r = find(&mut parent, x);
        groups[r].push(x);
    }
    let specs = m.catalog.specs();
    let mut survivors: Vec<usize> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            *g.iter()
                .min_by_key(|&&x| (specs[x].operation_count(), x))
                .expect("non-empty")
        })
        .collect();
    survivors.sort_unstable();
    let components = groups.into_iter().filter(|g| g.len() > 1).collect();
    let name = format!("{}-selected", m.catalog.name());
    Ok(Selection {
        catalog: m.catalog.subset(name, &survivors)?,
        survivors,
        components,
        window,
    })
}

/// Human-readable summary of a selection run.
pub fn render_report(m: &DiscriminationMatrix, sel: &Selection) -> String {
    let specs = m.catalog.specs();
    let mut s = String::new();
    let _ = writeln!(s, "catalog: {} ({} transformations)", m.catalog.name(), m.k());
    let _ = writeln!(s, "redundancy window: [{}, {}]", sel.window.0, sel.window.1);
    let _ = writeln!(s, "survivors: {}", sel.survivors.len());
    let _ = writeln!(s);
    let _ = writeln!(s, "redundancy components:");
    if sel.components.is_empty() {
        let _ = writeln!(s, "  (none)");
    }
    for comp in &sel.components {
        let keep = comp
            .iter()
            .find(|x| sel.survivors.contains(x))
            .expect("one survivor per component");
        let members: Vec<String> = comp.iter().map(|&x| format!("{x}:{}", specs[x])).collect();
        let _ = writeln!(s, "  keep {keep}:{} from [{}]", specs[*keep], members.join(", "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "kept transformations:");
    for &x in &sel.survivors {
        let _ = writeln!(s, "  {x}:{} (operations: {})", specs[x], specs[x].operation_count());
    }
    let suspicious: Vec<_> = m
        .pairs_within(SUSPICIOUS_WINDOW)
        .into_iter()
        .filter(|&(_, _, a)| a < sel.window.0 || a > sel.window.1)
        .collect();
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "suspicious pairs in [{}, {}] outside the window:",
        SUSPICIOUS_WINDOW.0, SUSPICIOUS_WINDOW.1
    );
    if suspicious.is_empty() {
        let _ = writeln!(s, "  (none)");
    }
    for (i, j, a) in suspicious {
        let _ = writeln!(s, "  ({i}:{}, {j}:{}) accuracy {a:.4}", specs[i], specs[j]);
    }
    let failed: Vec<&PairRecord> = m.pairs.iter().filter(|p| p.error.is_some()).collect();
    if !failed.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "failed pairs:");
        for p in failed {
            let _ = writeln!(s, "  ({}, {}): {}", p.i, p.j, p.error.as_deref().unwrap_or(""));
        }
    }
    s
}
