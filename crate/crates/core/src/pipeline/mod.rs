//! End-to-end pipeline: split, optional extractor training, feature
//! extraction, differential-evolution feature selection with the wrapper
//! fitness, final SVM scoring and multi-run averaging.

pub mod config;
pub mod data;
pub mod fitness;
pub mod report;
pub mod split;
pub mod synth;

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{self, ConvNetArch, ConvNetModel, TrainHistory};
use crate::de::{self, BitMask, RunHistory};
use crate::metrics::{mean_defined, MetricError, MetricReport, MulticlassConfusion};
use crate::svm::{train_ovr_k, SvmParams};

pub use config::{run_seed, ConfigError, PipelineConfig};
pub use data::{LabeledDataset, Samples};
pub use fitness::{score_model, select_columns, select_rows, Scored, WrapperFitness};
pub use split::{split_data, split_stratified, SplitIndices};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Original,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    Total,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Original, Method::Selected];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Selected => "selected",
        }
    }
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::Validation,
        SplitName::Test,
        SplitName::Total,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
            SplitName::Total => "total",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub mask: String,
    pub selected: usize,
    pub best_fitness: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub split: SplitName,
    pub method: Method,
    pub scored: Scored,
}

/// Everything one successful run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub de_history: Option<RunHistory>,
    pub train_history: Option<TrainHistory>,
    pub scored: Vec<ScoredEntry>,
}

/// Run-averaged results for one split and feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: SplitName,
    pub method: Method,
    /// Mean confusion over the successful runs, rounded to 4 decimals.
    pub confusion: MulticlassConfusion,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub class_names: Vec<String>,
    pub feature_count: usize,
    pub config: PipelineConfig,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub selection: Option<SelectionStats>,
    pub results: Vec<SplitResult>,
}

impl Summary {
    pub fn result(&self, split: SplitName, method: Method) -> Option<&SplitResult> {
        self.results
            .iter()
            .find(|r| r.split == split && r.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub summary: Summary,
    /// `(run, history)` for every run that reached selection.
    pub de_histories: Vec<(usize, RunHistory)>,
    /// `(run, history)` per trained extractor.
    pub train_histories: Vec<(usize, TrainHistory)>,
    pub extractor: Option<ConvNetModel>,
}

/// Rounds to the 4 decimals the reports print.
pub fn q4(v: f64) -> f64 {
    let r = (v * 1e4).round() / 1e4;
    // Avoid printing -0.0000.
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Metrics of an (averaged) confusion matrix as the reports print them: the
/// matrix is rounded to 4 decimals first and every derived value is rounded
/// again, so recomputing from the emitted tables reproduces them exactly.
pub fn report_from_confusion(
    confusion: &MulticlassConfusion,
    auc: &[Option<f64>],
    rmse: Option<f64>,
) -> Result<(MulticlassConfusion, MetricReport), MetricError> {
    let m = confusion.map(q4);
    let auc: Vec<Option<f64>> = auc.iter().map(|a| a.map(q4)).collect();
    let mut report = MetricReport::from_confusion(&m, &auc, rmse.map(q4))?;
    let round_conf = |c: &mut crate::metrics::ClassConfusion| {
        c.true_pos = q4(c.true_pos);
        c.true_neg = q4(c.true_neg);
        c.false_pos = q4(c.false_pos);
        c.false_neg = q4(c.false_neg);
    };
    let round_rates = |r: &mut crate::metrics::Rates| {
        for v in [
            &mut r.accuracy,
            &mut r.sensitivity,
            &mut r.specificity,
            &mut r.gmean,
        ] {
            *v = v.map(q4);
        }
    };
    for c in &mut report.per_class {
        round_conf(&mut c.confusion);
        round_rates(&mut c.rates);
    }
    round_conf(&mut report.aggregate.confusion);
    round_rates(&mut report.aggregate.rates);
    report.aggregate.auc = report.aggregate.auc.map(q4);
    Ok((m, report))
}

/// Architecture of the extractor for a dataset's images.
pub fn extractor_arch(ds: &LabeledDataset, hidden: usize) -> Result<ConvNetArch, String> {
    let images = ds.images().ok_or("dataset holds features, not images")?;
    let first = images.first().ok_or("no images")?;
    Ok(ConvNetArch {
        hidden,
        ..ConvNetArch::new(
            first.height(),
            first.width(),
            first.channels(),
            ds.classes(),
        )
    })
}

/// Trains a fresh extractor on the train part of `split`, validating on the
/// validation part.
pub fn train_extractor(
    cfg: &PipelineConfig,
    ds: &LabeledDataset,
    split: &SplitIndices,
    seed: u64,
) -> Result<(ConvNetModel, TrainHistory), String> {
    let images = ds.images().ok_or("dataset holds features, not images")?;
    let arch = extractor_arch(ds, cfg.hidden)?;
    let mut model = ConvNetModel::new(arch, cfg.dropout, seed).map_err(|e| e.to_string())?;
    let pick = |idx: &[usize]| {
        (
            idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>(),
            idx.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>(),
        )
    };
    let (tx, ty) = pick(&split.train);
    let (vx, vy) = pick(&split.validation);
    let history = convnet::train(&mut model, (&tx, &ty), (&vx, &vy), &cfg.train(seed))
        .map_err(|e| e.to_string())?;
    if let Some(last) = history.last() {
        log::info!(
            "extractor trained: train acc {:.4}, validation acc {:?}",
            last.train_acc,
            last.val_acc
        );
    }
    Ok((model, history))
}

fn make_split(cfg: &PipelineConfig, labels: &[usize], seed: u64) -> Result<SplitIndices, String> {
    if cfg.stratified {
        split_stratified(labels, seed)
    } else {
        split_data(labels.len(), seed)
    }
    .map_err(|e| e.to_string())
}

/// Trains the final SVM on the train rows of `columns` and scores every split.
pub fn score_methods(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    split: &SplitIndices,
    params: &SvmParams,
    methods: &[(Method, Vec<usize>)],
) -> Result<Vec<ScoredEntry>, String> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut out = Vec::new();
    for (method, columns) in methods {
        if columns.is_empty() {
            return Err(format!("{method} feature set is empty"));
        }
        let xc = select_columns(x, columns);
        let y_train: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
        let model = train_ovr_k(
            select_rows(xc.view(), &split.train).view(),
            &y_train,
            classes,
            params,
        )
        .map_err(|e| e.to_string())?;
        for name in SplitName::ALL {
            let rows = match name {
                SplitName::Train => &split.train,
                SplitName::Validation => &split.validation,
                SplitName::Test => &split.test,
                SplitName::Total => &all,
            };
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let scored = score_model(&model, select_rows(xc.view(), rows).view(), &y)
                .map_err(|e| e.to_string())?;
            out.push(ScoredEntry {
                split: name,
                method: *method,
                scored,
            });
        }
    }
    Ok(out)
}

/// Selection and scoring for one run on a fixed feature matrix.
pub fn run_on_features(
    cfg: &PipelineConfig,
    run: usize,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    split: &SplitIndices,
) -> Result<RunOutcome, RunFailure> {
    let seed = run_seed(cfg.seed, run);
    let fail = |stage: &str, message: String| RunFailure {
        run,
        stage: stage.to_string(),
        message,
    };
    let params = cfg.svm(seed);
    let fitness = WrapperFitness::new(x, labels, classes, split, params)
        .map_err(|e| fail("selection", e.to_string()))?;
    let outcome = de::run_parallel(&cfg.de(seed), x.ncols(), |m: &BitMask| fitness.evaluate(m))
        .map_err(|e| fail("selection", e.to_string()))?;
    let mask = outcome.best.mask;
    log::info!(
        "run {run}: fitness {:.6} with {} of {} features",
        outcome.best.fitness,
        mask.count_ones(),
        mask.len()
    );
    let scored = score_methods(
        x,
        labels,
        classes,
        split,
        &params,
        &[
            (Method::Original, (0..x.ncols()).collect()),
            (Method::Selected, mask.selected()),
        ],
    )
    .map_err(|e| fail("final", e))?;
    Ok(RunOutcome {
        record: RunRecord {
            run,
            seed,
            mask: mask.to_string(),
            selected: mask.count_ones(),
            best_fitness: outcome.best.fitness,
            evaluations: outcome.history.total_evaluations(),
        },
        de_history: Some(outcome.history),
        train_history: None,
        scored,
    })
}

/// Averages the successful runs into the report bundle. Runs are reduced in
/// the order given.
pub fn summarize(
    cfg: &PipelineConfig,
    class_names: Vec<String>,
    feature_count: usize,
    outcomes: Vec<Result<RunOutcome, RunFailure>>,
) -> Result<ReportBundle, PipelineError> {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut de_histories = Vec::new();
    let mut train_histories = Vec::new();
    let mut scored: Vec<Vec<ScoredEntry>> = Vec::new();
    for o in outcomes {
        match o {
            Ok(o) => {
                let r = o.record.run;
                if let Some(h) = o.de_history {
                    de_histories.push((r, h));
                }
                if let Some(h) = o.train_history {
                    train_histories.push((r, h));
                }
                runs.push(o.record);
                scored.push(o.scored);
            }
            Err(f) => {
                log::warn!("run {} failed during {}: {}", f.run, f.stage, f.message);
                failures.push(f);
            }
        }
    }

    let mut results = Vec::new();
    for method in Method::ALL {
        for split in SplitName::ALL {
            let entries: Vec<&Scored> = scored
                .iter()
                .flatten()
                .filter(|e| e.split == split && e.method == method)
                .map(|e| &e.scored)
                .collect();
            if entries.is_empty() {
                continue;
            }
            let confusions: Vec<MulticlassConfusion> =
                entries.iter().map(|s| s.confusion.clone()).collect();
            let mean = MulticlassConfusion::average_runs(&confusions)?;
            let auc: Vec<Option<f64>> = (0..class_names.len())
                .map(|k| mean_defined(&entries.iter().map(|s| s.auc[k]).collect::<Vec<_>>()))
                .collect();
            let rmse = entries.iter().map(|s| s.rmse).sum::<f64>() / entries.len() as f64;
            let (confusion, metrics) = report_from_confusion(&mean, &auc, Some(rmse))?;
            results.push(SplitResult {
                split,
                method,
                confusion,
                metrics,
            });
        }
    }

    let selection = (!runs.is_empty()).then(|| {
        let counts: Vec<f64> = runs.iter().map(|r| r.selected as f64).collect();
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        SelectionStats {
            mean,
            std: var.sqrt(),
            min: runs.iter().map(|r| r.selected).min().unwrap_or(0),
            max: runs.iter().map(|r| r.selected).max().unwrap_or(0),
        }
    });

    Ok(ReportBundle {
        summary: Summary {
            class_names,
            feature_count,
            config: *cfg,
            runs,
            failures,
            selection,
            results,
        },
        de_histories,
        train_histories,
        extractor: None,
    })
}

fn extract(model: &ConvNetModel, ds: &LabeledDataset) -> Result<Array2<f64>, String> {
    let images = ds.images().ok_or("dataset holds features, not images")?;
    convnet::extract_features(model, images).map_err(|e| e.to_string())
}

/// Runs the whole protocol. Run `r` (1-based) uses seed `cfg.seed + r` for its
/// split, selection and SVMs. Image datasets go through the extractor first:
/// by default one extractor is trained on run 1's split and its features are
/// reused by every run; with `retrain_extractor` each run trains its own.
///
/// Failed runs are listed in the summary and left out of the averages.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    ds: &LabeledDataset,
) -> Result<ReportBundle, PipelineError> {
    cfg.validate()?;
    ds.validate()?;
    let classes = ds.classes();
    let runs: Vec<usize> = (1..=cfg.runs).collect();

    let fail_all = |stage: &str, message: &str| -> Vec<Result<RunOutcome, RunFailure>> {
        runs.iter()
            .map(|&run| {
                Err(RunFailure {
                    run,
                    stage: stage.to_string(),
                    message: message.to_string(),
                })
            })
            .collect()
    };

    let mut shared_history = None;
    let (outcomes, extractor, feature_count) =
        match &ds.samples {
            Samples::Features(x) => {
                let outcomes =
                    runs.par_iter()
                        .map(|&run| {
                            let split = make_split(cfg, &ds.labels, run_seed(cfg.seed, run))
                                .map_err(|m| RunFailure {
                                    run,
                                    stage: "split".into(),
                                    message: m,
                                })?;
                            run_on_features(cfg, run, x.view(), &ds.labels, classes, &split)
                        })
                        .collect();
                (outcomes, None, x.ncols())
            }
            Samples::Images(_) if cfg.retrain_extractor => {
                let results: Vec<(Result<RunOutcome, RunFailure>, Option<ConvNetModel>)> = runs
                    .par_iter()
                    .map(|&run| {
                        let seed = run_seed(cfg.seed, run);
                        let fail = |stage: &str, message: String| RunFailure {
                            run,
                            stage: stage.to_string(),
                            message,
                        };
                        let attempt = || -> Result<(RunOutcome, ConvNetModel), RunFailure> {
                            let split =
                                make_split(cfg, &ds.labels, seed).map_err(|m| fail("split", m))?;
                            let (model, history) = train_extractor(cfg, ds, &split, seed)
                                .map_err(|m| fail("extractor", m))?;
                            let x = extract(&model, ds).map_err(|m| fail("extract", m))?;
                            let mut o =
                                run_on_features(cfg, run, x.view(), &ds.labels, classes, &split)?;
                            o.train_history = Some(history);
                            Ok((o, model))
                        };
                        match attempt() {
                            Ok((o, m)) => (Ok(o), Some(m)),
                            Err(f) => (Err(f), None),
                        }
                    })
                    .collect();
                let first = results.iter().find_map(|(_, m)| m.clone());
                (
                    results.into_iter().map(|(o, _)| o).collect(),
                    first,
                    cfg.hidden,
                )
            }
            Samples::Images(_) => {
                let seed = run_seed(cfg.seed, 1);
                let trained = make_split(cfg, &ds.labels, seed)
                    .and_then(|split| train_extractor(cfg, ds, &split, seed))
                    .and_then(|(model, history)| extract(&model, ds).map(|x| (model, history, x)));
                match trained {
                    Err(message) => (fail_all("extractor", &message), None, cfg.hidden),
                    Ok((model, history, x)) => {
                        let outcomes: Vec<Result<RunOutcome, RunFailure>> = runs
                            .par_iter()
                            .map(|&run| {
                                let split = make_split(cfg, &ds.labels, run_seed(cfg.seed, run))
                                    .map_err(|m| RunFailure {
                                        run,
                                        stage: "split".into(),
                                        message: m,
                                    })?;
                                run_on_features(cfg, run, x.view(), &ds.labels, classes, &split)
                            })
                            .collect();
                        shared_history = Some(history);
                        (outcomes, Some(model), cfg.hidden)
                    }
                }
            }
        };

    let mut bundle = summarize(cfg, ds.class_names.clone(), feature_count, outcomes)?;
    bundle.extractor = extractor;
    if let Some(h) = shared_history {
        bundle.train_histories.insert(0, (1, h));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use synth::FeatureSynth;

    fn small_cfg(runs: usize) -> PipelineConfig {
        PipelineConfig {
            runs,
            generations: 10,
            ..Default::default()
        }
    }

    #[test]
    fn q4_rounds_half_away() {
        assert_eq!(q4(0.99843), 0.9984);
        assert_eq!(q4(-0.00001), 0.0);
        assert_eq!(q4(51.75), 51.75);
    }

    #[test]
    fn two_runs_average_their_confusions() {
        let ds = FeatureSynth::default().generate().unwrap();
        let cfg = small_cfg(2);
        let bundle = run_pipeline(&cfg, &ds).unwrap();
        assert!(bundle.summary.failures.is_empty());
        assert_eq!(bundle.summary.runs.len(), 2);

        let x = ds.features().unwrap();
        let singles: Vec<RunOutcome> = (1..=2)
            .map(|r| {
                let split = split_data(ds.len(), run_seed(cfg.seed, r)).unwrap();
                run_on_features(&cfg, r, x.view(), &ds.labels, 3, &split).unwrap()
            })
            .collect();
        let pick = |o: &RunOutcome| {
            o.scored
                .iter()
                .find(|e| e.split == SplitName::Test && e.method == Method::Selected)
                .unwrap()
                .scored
                .confusion
                .clone()
        };
        let mean = MulticlassConfusion::average_runs(&[pick(&singles[0]), pick(&singles[1])])
            .unwrap()
            .map(q4);
        let reported = &bundle
            .summary
            .result(SplitName::Test, Method::Selected)
            .unwrap()
            .confusion;
        assert_eq!(reported, &mean);
        for (r, s) in bundle.summary.runs.iter().zip(&singles) {
            assert_eq!(r, &s.record);
            assert_eq!(r.selected, r.mask.chars().filter(|&c| c == '1').count());
        }
    }

    #[test]
    fn test_split_totals_match_sizes() {
        let ds = FeatureSynth::default().generate().unwrap();
        let bundle = run_pipeline(&small_cfg(1), &ds).unwrap();
        let (tr, v, t) = split::split_sizes(ds.len()).unwrap();
        for (name, n) in [
            (SplitName::Train, tr),
            (SplitName::Validation, v),
            (SplitName::Test, t),
            (SplitName::Total, ds.len()),
        ] {
            let r = bundle.summary.result(name, Method::Original).unwrap();
            assert_eq!(r.confusion.total(), n as f64);
        }
    }

    #[test]
    fn failures_are_recorded() {
        // One class only in a tiny set: every run fails at selection.
        let ds = LabeledDataset::from_features(
            Array2::from_shape_fn((12, 3), |(i, j)| (i * 3 + j) as f64),
            vec![0; 12],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let bundle = run_pipeline(&small_cfg(2), &ds).unwrap();
        assert_eq!(bundle.summary.failures.len(), 2);
        assert!(bundle.summary.results.is_empty());
        assert!(bundle.summary.selection.is_none());
    }
}
