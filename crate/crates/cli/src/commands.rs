//! Stage implementations. Every stage writes into its own directory under the
//! output root together with a manifest, and is skipped when an up-to-date
//! manifest is already there.
//!
//! ```text
//! data/seed-S/{train,validation,test}.stmp
//! runs/CATALOG/seed-S/train/model.gscm
//! runs/CATALOG/seed-S/score/{scorer.gsds,scores.csv}
//! runs/CATALOG/seed-S/eval/metrics.json
//! selection/CATALOG/seed-S/{matrix.csv,report.txt,CATALOG-selected.txt,selection.json}
//! aggregate/{aggregate.csv,welch.csv,table.md}
//! report/report.md
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use anyhow::{anyhow, bail, Context, Result};
use geoscore::classifier::{
    build_self_labeled, read_checkpoint_file, train, write_checkpoint_file, Classifier, ClassifierModel,
};
use geoscore::dirichlet::{
    fit_scorer, fit_threshold, format_score_csv, parse_score_csv, read_scorer_file, write_scorer_file,
};
use geoscore::eval::{render_table, summarize, summary_csv, welch_csv, RunResult};
use geoscore::pipeline::{run_result, Detector};
use geoscore::selection::{build_discrimination_matrix, render_report, select_transformations};
use geoscore::stamps::{read_dataset, write_dataset_file, Split, StampDataset};
use geoscore::synth::generate_benchmark;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve_catalog, Catalog, ExperimentConfig};
use crate::manifest::{write_atomic, StageKey};

pub struct RunContext {
    pub root: PathBuf,
    pub cfg: ExperimentConfig,
    pub force: bool,
    pub deterministic: bool,
}

impl RunContext {
    /// Runs `body` unless the stage is up to date. `body` returns the output
    /// paths (relative to the root) that go into the manifest.
    fn stage(&self, key: StageKey, dir: &Path, what: &str, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<()> {
        if !self.force && key.up_to_date(&self.root, dir) {
            eprintln!("{what}: up to date");
            return Ok(());
        }
        let (started, clock) = (SystemTime::now(), Instant::now());
        let outputs = body()?;
        let secs = clock.elapsed().as_secs_f64();
        let timing = (!self.deterministic).then_some((started, secs));
        key.write_manifest(&self.root, dir, &self.cfg, &outputs, timing)?;
        eprintln!("{what}: done in {secs:.1} s");
        Ok(())
    }

    fn data_path(&self, seed: u64, split: Split) -> PathBuf {
        let file = format!("{}.stmp", split.file_stem());
        match &self.cfg.data_dir {
            Some(d) => d.join(file),
            None => Path::new("data").join(format!("seed-{seed}")).join(file),
        }
    }

    fn read_split(&self, seed: u64, split: Split) -> Result<StampDataset<f32>> {
        let rel = self.data_path(seed, split);
        let path = self.root.join(&rel);
        if !path.is_file() {
            bail!(
                "{} is missing; run `geoscore synth` first or set data_dir",
                path.display()
            );
        }
        read_dataset(&path).with_context(|| format!("reading {}", path.display()))
    }

    fn run_dir(&self, cat: &Catalog, seed: u64) -> PathBuf {
        Path::new("runs").join(cat.label()).join(format!("seed-{seed}"))
    }

    /// Fans `f` out over every (catalog, seed) pair and reports every failure.
    fn each_run(&self, stage: &str, f: impl Fn(&Catalog, u64) -> Result<()> + Sync) -> Result<()> {
        let cats = self.cfg.catalogs()?;
        let jobs: Vec<(&Catalog, u64)> = cats
            .iter()
            .flat_map(|c| self.cfg.seeds.iter().map(move |&s| (c, s)))
            .collect();
        let failures: Vec<String> = jobs
            .par_iter()
            .filter_map(|&(c, s)| {
                f(c, s)
                    .with_context(|| format!("stage {stage} failed for catalog {} seed {s}", c.key))
                    .err()
                    .map(|e| format!("{e:#}"))
            })
            .collect();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(anyhow!(failures.join("\n")))
        }
    }
}

pub fn synth(ctx: &RunContext) -> Result<()> {
    if ctx.cfg.data_dir.is_some() {
        eprintln!("synth: data_dir is set; nothing to generate");
        return Ok(());
    }
    let failures: Vec<String> = ctx
        .cfg
        .seeds
        .par_iter()
        .filter_map(|&seed| {
            synth_one(ctx, seed)
                .with_context(|| format!("stage synth failed for seed {seed}"))
                .err()
                .map(|e| format!("{e:#}"))
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(failures.join("\n")))
    }
}

fn synth_one(ctx: &RunContext, seed: u64) -> Result<()> {
    let sc = ctx.cfg.synth_config(seed);
    let dir = Path::new("data").join(format!("seed-{seed}"));
    let key = StageKey::new("synth", serde_json::to_value(&sc)?, &ctx.root, &[])?;
    ctx.stage(key, &dir, &format!("synth seed {seed}"), || {
        let b = generate_benchmark(&sc)?;
        let mut out = Vec::new();
        for (split, d) in [
            (Split::Train, &b.train),
            (Split::Validation, &b.validation),
            (Split::Test, &b.test),
        ] {
            let rel = ctx.data_path(seed, split);
            write_dataset_file(d, ctx.root.join(&rel))?;
            out.push(rel);
        }
        Ok(out)
    })
}

pub fn train_all(ctx: &RunContext) -> Result<()> {
    ctx.each_run("train", |cat, seed| {
        let cc = ctx.cfg.classifier_config(seed, cat.set.len())?;
        let inputs = [
            ctx.data_path(seed, Split::Train),
            ctx.data_path(seed, Split::Validation),
        ];
        let key = json!({ "classifier": cc, "catalog": cat.set.to_text() });
        let key = StageKey::new("train", key, &ctx.root, &inputs)?;
        let dir = ctx.run_dir(cat, seed).join("train");
        ctx.stage(key, &dir, &format!("train {} seed {seed}", cat.label()), || {
            let tr = build_self_labeled(&ctx.read_split(seed, Split::Train)?, &cat.set)?;
            let va = build_self_labeled(&ctx.read_split(seed, Split::Validation)?, &cat.set)?;
            let model = train(&tr, &va, &cc)?;
            let rel = dir.join("model.gscm");
            write_checkpoint_file(&model, ctx.root.join(&rel))?;
            Ok(vec![rel])
        })
    })
}

fn score_key(ctx: &RunContext, cat: &Catalog, seed: u64) -> Result<StageKey> {
    let inputs = [
        ctx.run_dir(cat, seed).join("train/model.gscm"),
        ctx.data_path(seed, Split::Train),
        ctx.data_path(seed, Split::Validation),
        ctx.data_path(seed, Split::Test),
    ];
    for rel in &inputs {
        if !ctx.root.join(rel).is_file() {
            bail!(
                "{} is missing; run the earlier stages first",
                ctx.root.join(rel).display()
            );
        }
    }
    StageKey::new("score", json!({ "catalog": cat.set.to_text() }), &ctx.root, &inputs)
}

pub fn score_all(ctx: &RunContext) -> Result<()> {
    ctx.each_run("score", |cat, seed| {
        let key = score_key(ctx, cat, seed)?;
        let run = ctx.run_dir(cat, seed);
        let dir = run.join("score");
        ctx.stage(key, &dir, &format!("score {} seed {seed}", cat.label()), || {
            let model: ClassifierModel<f32> = read_checkpoint_file(ctx.root.join(run.join("train/model.gscm")))?;
            if model.n_classes() != cat.set.len() {
                bail!(
                    "model has {} classes but catalog {} has {} transformations",
                    model.n_classes(),
                    cat.key,
                    cat.set.len()
                );
            }
            let train_inliers = ctx.read_split(seed, Split::Train)?;
            let validation = ctx.read_split(seed, Split::Validation)?;
            let test = ctx.read_split(seed, Split::Test)?;
            let mut scorer = fit_scorer(&model, &train_inliers.stamps, &cat.set)?;
            fit_threshold(&mut scorer, &validation.stamps, &model, &cat.set)?;
            let detector = Detector { model, scorer };
            let rows = detector.score_rows(&cat.set, &test)?;
            let (scorer_rel, csv_rel) = (dir.join("scorer.gsds"), dir.join("scores.csv"));
            write_scorer_file(&detector.scorer, ctx.root.join(&scorer_rel))?;
            write_atomic(&ctx.root.join(&csv_rel), format_score_csv(&rows).as_bytes())?;
            Ok(vec![scorer_rel, csv_rel])
        })
    })
}

fn metrics_path(ctx: &RunContext, cat: &Catalog, seed: u64) -> PathBuf {
    ctx.run_dir(cat, seed).join("eval/metrics.json")
}

pub fn eval_all(ctx: &RunContext) -> Result<()> {
    ctx.each_run("eval", |cat, seed| {
        let dir = ctx.run_dir(cat, seed).join("score");
        let inputs = [
            dir.join("scores.csv"),
            dir.join("scorer.gsds"),
            ctx.data_path(seed, Split::Test),
        ];
        for rel in &inputs {
            if !ctx.root.join(rel).is_file() {
                bail!(
                    "{} is missing; run `geoscore score` first",
                    ctx.root.join(rel).display()
                );
            }
        }
        // the score stage's fingerprint identifies the run
        let fingerprint = score_key(ctx, cat, seed)?.fingerprint();
        let key = StageKey::new("eval", json!({ "run": fingerprint, "seed": seed }), &ctx.root, &inputs)?;
        let out_dir = ctx.run_dir(cat, seed).join("eval");
        ctx.stage(key, &out_dir, &format!("eval {} seed {seed}", cat.label()), || {
            let text = std::fs::read_to_string(ctx.root.join(&inputs[0]))?;
            let rows = parse_score_csv(&text)?;
            let scorer = read_scorer_file(ctx.root.join(&inputs[1]))?;
            let lambda = scorer.lambda.ok_or_else(|| anyhow!("scorer file has no threshold"))?;
            let test = ctx.read_split(seed, Split::Test)?;
            let result = run_result(&rows, &test, lambda, fingerprint.clone(), seed)?;
            let rel = metrics_path(ctx, cat, seed);
            let mut text = serde_json::to_string_pretty(&result)?;
            text.push('\n');
            write_atomic(&ctx.root.join(&rel), text.as_bytes())?;
            Ok(vec![rel])
        })
    })?;
    aggregate(ctx)
}

fn aggregate(ctx: &RunContext) -> Result<()> {
    let cats = ctx.cfg.catalogs()?;
    let mut inputs = Vec::new();
    for c in &cats {
        for &s in &ctx.cfg.seeds {
            inputs.push(metrics_path(ctx, c, s));
        }
    }
    let labels: Vec<String> = cats.iter().map(Catalog::label).collect();
    let key = json!({ "catalogs": labels, "comparisons": ctx.cfg.comparisons() });
    let key = StageKey::new("aggregate", key, &ctx.root, &inputs)?;
    let dir = PathBuf::from("aggregate");
    let mut table = None;
    ctx.stage(key, &dir, "aggregate", || {
        let mut runs: Vec<Vec<RunResult>> = Vec::new();
        for c in &cats {
            let mut rs = Vec::new();
            for &s in &ctx.cfg.seeds {
                let text = std::fs::read_to_string(ctx.root.join(metrics_path(ctx, c, s)))?;
                rs.push(serde_json::from_str(&text)?);
            }
            runs.push(rs);
        }
        let (summaries, welch) = summarize(&labels, &runs, &ctx.cfg.comparisons());
        let text = render_table(&summaries, &welch);
        let outputs = vec![dir.join("aggregate.csv"), dir.join("welch.csv"), dir.join("table.md")];
        write_atomic(&ctx.root.join(&outputs[0]), summary_csv(&summaries).as_bytes())?;
        write_atomic(&ctx.root.join(&outputs[1]), welch_csv(&welch).as_bytes())?;
        write_atomic(&ctx.root.join(&outputs[2]), text.as_bytes())?;
        table = Some(text);
        Ok(outputs)
    })?;
    let text = match table {
        Some(t) => t,
        None => std::fs::read_to_string(ctx.root.join("aggregate/table.md"))?,
    };
    print!("{text}");
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub catalog: String,
    pub seed: u64,
    pub window: (f64, f64),
    pub survivors: Vec<usize>,
    pub survivor_specs: Vec<String>,
    pub components: Vec<Vec<usize>>,
}

fn selection_dir(label: &str, seed: u64) -> PathBuf {
    Path::new("selection").join(label).join(format!("seed-{seed}"))
}

pub fn select_all(ctx: &RunContext) -> Result<()> {
    let cat = Catalog {
        key: ctx.cfg.selection_catalog.clone(),
        set: resolve_catalog(&ctx.cfg.selection_catalog)?,
    };
    let failures: Vec<String> = ctx
        .cfg
        .seeds
        .par_iter()
        .filter_map(|&seed| {
            select_one(ctx, &cat, seed)
                .with_context(|| format!("stage select failed for catalog {} seed {seed}", cat.key))
                .err()
                .map(|e| format!("{e:#}"))
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(failures.join("\n")))
    }
}

fn select_one(ctx: &RunContext, cat: &Catalog, seed: u64) -> Result<()> {
    let pc = ctx.cfg.pair_config(seed)?;
    let inputs = [
        ctx.data_path(seed, Split::Train),
        ctx.data_path(seed, Split::Validation),
    ];
    for rel in &inputs {
        if !ctx.root.join(rel).is_file() {
            bail!(
                "{} is missing; run `geoscore synth` first or set data_dir",
                ctx.root.join(rel).display()
            );
        }
    }
    let key = json!({ "pair_classifier": pc, "window": ctx.cfg.window, "catalog": cat.set.to_text() });
    let key = StageKey::new("select", key, &ctx.root, &inputs)?;
    let label = cat.label();
    let dir = selection_dir(&label, seed);
    ctx.stage(key, &dir, &format!("select {label} seed {seed}"), || {
        let train_inliers = ctx.read_split(seed, Split::Train)?;
        let validation = ctx.read_split(seed, Split::Validation)?;
        let m = build_discrimination_matrix(&train_inliers, &validation, &cat.set, &pc)?;
        let matrix_rel = dir.join("matrix.csv");
        write_atomic(&ctx.root.join(&matrix_rel), m.to_csv().as_bytes())?;
        let failed = m.failed_pairs();
        if !failed.is_empty() {
            let first = m.pairs.iter().find_map(|p| p.error.clone()).unwrap_or_default();
            bail!(
                "{} pair classifiers failed (first: {first}); the partial matrix is in {}",
                failed.len(),
                matrix_rel.display()
            );
        }
        let sel = select_transformations(&m, ctx.cfg.window)?;
        let report_rel = dir.join("report.txt");
        let pruned_rel = dir.join(format!("{label}-selected.txt"));
        let json_rel = dir.join("selection.json");
        write_atomic(&ctx.root.join(&report_rel), render_report(&m, &sel).as_bytes())?;
        write_atomic(&ctx.root.join(&pruned_rel), sel.catalog.to_text().as_bytes())?;
        let summary = SelectionSummary {
            catalog: label.clone(),
            seed,
            window: sel.window,
            survivor_specs: sel.survivors.iter().map(|&i| cat.set.get(i).to_string()).collect(),
            survivors: sel.survivors,
            components: sel.components,
        };
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        write_atomic(&ctx.root.join(&json_rel), text.as_bytes())?;
        eprintln!(
            "select {label} seed {seed}: {} of {} transformations kept",
            summary.survivors.len(),
            cat.set.len()
        );
        Ok(vec![matrix_rel, report_rel, pruned_rel, json_rel])
    })
}

/// Collects whatever aggregate and selection outputs exist into one document.
pub fn report(ctx: &RunContext) -> Result<()> {
    let mut inputs = Vec::new();
    let table_rel = PathBuf::from("aggregate/table.md");
    let has_table = ctx.root.join(&table_rel).is_file();
    if has_table {
        inputs.push(table_rel.clone());
    }
    let sel_label = resolve_catalog(&ctx.cfg.selection_catalog)
        .map(|set| {
            Catalog {
                key: String::new(),
                set,
            }
            .label()
        })
        .ok();
    let mut selections = Vec::new();
    if let Some(label) = &sel_label {
        for &s in &ctx.cfg.seeds {
            let rel = selection_dir(label, s).join("selection.json");
            if ctx.root.join(&rel).is_file() {
                inputs.push(rel.clone());
                selections.push(rel);
            }
        }
    }
    if inputs.is_empty() {
        bail!(
            "nothing to report in {}; run `geoscore eval` or `geoscore select` first",
            ctx.root.display()
        );
    }
    let key = StageKey::new("report", serde_json::Value::Null, &ctx.root, &inputs)?;
    let dir = PathBuf::from("report");
    ctx.stage(key, &dir, "report", || {
        let mut doc = String::from("# geoscore report\n");
        if has_table {
            doc.push_str("\n## Detection\n\n");
            doc.push_str(&std::fs::read_to_string(ctx.root.join(&table_rel))?);
        }
        if !selections.is_empty() {
            let mut by_set: BTreeMap<Vec<usize>, Vec<u64>> = BTreeMap::new();
            let mut rows = String::new();
            for rel in &selections {
                let s: SelectionSummary = serde_json::from_str(&std::fs::read_to_string(ctx.root.join(rel))?)?;
                let _ = writeln!(
                    rows,
                    "| {} | {} | {} |",
                    s.seed,
                    s.survivors.len(),
                    s.survivor_specs.join("; ")
                );
                by_set.entry(s.survivors).or_default().push(s.seed);
            }
            let name = sel_label.as_deref().unwrap_or_default();
            let _ = write!(
                doc,
                "\n## Transformation selection ({name})\n\n| seed | kept | transformations |\n|---|---|---|\n{rows}"
            );
            let (_, modal) = by_set.iter().max_by_key(|(_, seeds)| seeds.len()).expect("non-empty");
            let _ = writeln!(
                doc,
                "\n{} of {} seeds agree on the most common survivor set.",
                modal.len(),
                selections.len()
            );
        }
        let rel = dir.join("report.md");
        write_atomic(&ctx.root.join(&rel), doc.as_bytes())?;
        Ok(vec![rel])
    })?;
    eprintln!("report: {}", ctx.root.join("report/report.md").display());
    Ok(())
}

pub fn pipeline(ctx: &RunContext) -> Result<()> {
    synth(ctx)?;
    train_all(ctx)?;
    score_all(ctx)?;
    eval_all(ctx)?;
    report(ctx)
}
