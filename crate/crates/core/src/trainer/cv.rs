use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    evaluate_classification, evaluate_regression, ClassificationMetrics, RegressionMetrics,
};
use super::{
    group_kfold_split, kfold_split, train, validation_split, Dataset, History, NormScope,
    TrainConfig,
};
use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::ingest::{EYE_FEATURES, HEAD_FEATURES};
use crate::labeling::{
    classify_severity, compute_fms_quantiles, InputScalers, ModelInputs, PreparedWindow,
    QuantileThresholds, Selection, SeverityClass,
};
use crate::model::{Batch, FusionModel, ModelConfig, Prediction, Targets, Task, CLASSES};
use crate::preprocess::{ColumnScaler, ZScore};
use crate::rng::SeedStream;

pub fn session_key(w: &PreparedWindow) -> String {
    format!("{}/{}", w.participant, w.simulation)
}

/// Label thresholds and normalization constants fitted on one training
/// partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPreparation {
    pub quantiles: QuantileThresholds,
    pub global: InputScalers,
    /// Keyed by `participant/Simulation`.
    pub sessions: BTreeMap<String, InputScalers>,
}

fn stacked_rows<'a>(windows: impl Iterator<Item = &'a PreparedWindow>) -> (Vec<f64>, Vec<f64>) {
    let mut eye = Vec::new();
    let mut head = Vec::new();
    for w in windows {
        eye.extend_from_slice(w.eye.data());
        head.extend_from_slice(w.head.data());
    }
    (eye, head)
}

/// Fits quantiles on the training FMS values and z-score constants on the
/// training rows. With [`NormScope::Session`] each session gets its own
/// constants, falling back to the pooled ones for constant columns.
pub fn fit_fold_preparation(
    windows: &[PreparedWindow],
    train: &[usize],
    scope: NormScope,
) -> Result<FoldPreparation> {
    if train.is_empty() {
        return Err(Error::Empty("training partition is empty".into()));
    }
    let scores: Vec<f64> = train.iter().map(|&i| windows[i].fms).collect();
    let quantiles = compute_fms_quantiles(&scores)?;
    let (eye, head) = stacked_rows(train.iter().map(|&i| &windows[i]));
    let global = InputScalers {
        eye: ColumnScaler::fit(&eye, EYE_FEATURES, None)?,
        head: ColumnScaler::fit(&head, HEAD_FEATURES, None)?,
    };
    let mut by_session: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in train.iter().filter(|_| scope == NormScope::Session) {
        by_session
            .entry(session_key(&windows[i]))
            .or_default()
            .push(i);
    }
    let mut sessions = BTreeMap::new();
    for (key, idx) in by_session {
        let (eye, head) = stacked_rows(idx.iter().map(|&i| &windows[i]));
        sessions.insert(
            key,
            InputScalers {
                eye: ColumnScaler::fit(&eye, EYE_FEATURES, Some(&global.eye))?,
                head: ColumnScaler::fit(&head, HEAD_FEATURES, Some(&global.head))?,
            },
        );
    }
    Ok(FoldPreparation {
        quantiles,
        global,
        sessions,
    })
}

fn scaler_kv(kv: &mut KeyValues, prefix: &str, s: &ColumnScaler) {
    let means: Vec<String> = s.columns.iter().map(|z| z.mean.to_string()).collect();
    let stds: Vec<String> = s.columns.iter().map(|z| z.std.to_string()).collect();
    kv.set(&format!("{prefix}.mean"), means.join(","));
    kv.set(&format!("{prefix}.std"), stds.join(","));
}

fn scaler_from_kv(kv: &KeyValues, prefix: &str) -> Result<ColumnScaler> {
    let get = |k: String| {
        kv.get(&k)
            .ok_or_else(|| Error::Config(format!("missing {k}")))
    };
    let means: Vec<f64> = parse_list(prefix, get(format!("{prefix}.mean"))?)?;
    let stds: Vec<f64> = parse_list(prefix, get(format!("{prefix}.std"))?)?;
    if means.len() != stds.len() {
        return Err(Error::Config(format!("{prefix}: mean/std lengths differ")));
    }
    Ok(ColumnScaler {
        columns: means
            .into_iter()
            .zip(stds)
            .map(|(mean, std)| ZScore { mean, std })
            .collect(),
    })
}

impl FoldPreparation {
    pub fn scalers_for(&self, w: &PreparedWindow) -> &InputScalers {
        self.sessions.get(&session_key(w)).unwrap_or(&self.global)
    }

    pub fn label(&self, w: &PreparedWindow) -> Result<SeverityClass> {
        classify_severity(w.fms, &self.quantiles)
    }

    pub fn inputs(
        &self,
        w: &PreparedWindow,
        timestep: usize,
        selection: Selection,
    ) -> Result<ModelInputs> {
        w.model_inputs(timestep, selection, Some(self.scalers_for(w)))
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let q = self.quantiles;
        kv.set("quantiles", format!("{},{},{}", q.q1, q.q2, q.q3));
        scaler_kv(&mut kv, "norm.global.eye", &self.global.eye);
        scaler_kv(&mut kv, "norm.global.head", &self.global.head);
        for (k, s) in &self.sessions {
            scaler_kv(&mut kv, &format!("norm.session.{k}.eye"), &s.eye);
            scaler_kv(&mut kv, &format!("norm.session.{k}.head"), &s.head);
        }
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let q: Vec<f64> = parse_list(
            "quantiles",
            kv.get("quantiles")
                .ok_or_else(|| Error::Config("missing quantiles".into()))?,
        )?;
        if q.len() != 3 {
            return Err(Error::Config("quantiles need three values".into()));
        }
        let global = InputScalers {
            eye: scaler_from_kv(kv, "norm.global.eye")?,
            head: scaler_from_kv(kv, "norm.global.head")?,
        };
        let mut sessions = BTreeMap::new();
        for (k, _) in kv.iter() {
            if let Some(key) = k
                .strip_prefix("norm.session.")
                .and_then(|r| r.strip_suffix(".eye.mean"))
            {
                let p = format!("norm.session.{key}");
                sessions.insert(
                    key.to_string(),
                    InputScalers {
                        eye: scaler_from_kv(kv, &format!("{p}.eye"))?,
                        head: scaler_from_kv(kv, &format!("{p}.head"))?,
                    },
                );
            }
        }
        Ok(Self {
            quantiles: QuantileThresholds {
                q1: q[0],
                q2: q[1],
                q3: q[2],
            },
            global,
            sessions,
        })
    }
}

/// Which windows fed each stage of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldAudit {
    pub fold: usize,
    pub test: Vec<usize>,
    /// Whole training partition (fit ∪ validation).
    pub train: Vec<usize>,
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
    pub quantile_source: Vec<usize>,
    pub normalization_source: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_fit: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub quantiles: QuantileThresholds,
    pub classification: Option<ClassificationMetrics>,
    /// Accuracy of always answering the training partition's majority class.
    pub baseline_accuracy: Option<f64>,
    pub regression: Option<RegressionMetrics>,
    pub history: History,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanMetrics {
    pub accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub precision: [Option<f64>; CLASSES],
    pub recall: [Option<f64>; CLASSES],
    pub rmse: Option<f64>,
    pub plcc: Option<f64>,
    pub r2: Option<f64>,
}

/// Arithmetic mean over the folds where the value is defined.
fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

impl MeanMetrics {
    fn from_folds(folds: &[FoldResult]) -> Self {
        fn cls(f: &FoldResult) -> Option<&ClassificationMetrics> {
            f.classification.as_ref()
        }
        fn reg(f: &FoldResult) -> Option<&RegressionMetrics> {
            f.regression.as_ref()
        }
        Self {
            accuracy: mean_of(folds.iter().map(|f| cls(f).map(|c| c.accuracy))),
            baseline_accuracy: mean_of(folds.iter().map(|f| f.baseline_accuracy)),
            precision: std::array::from_fn(|k| {
                mean_of(folds.iter().map(|f| cls(f).and_then(|c| c.precision[k])))
            }),
            recall: std::array::from_fn(|k| {
                mean_of(folds.iter().map(|f| cls(f).and_then(|c| c.recall[k])))
            }),
            rmse: mean_of(folds.iter().map(|f| reg(f).map(|r| r.rmse))),
            plcc: mean_of(folds.iter().map(|f| reg(f).and_then(|r| r.plcc))),
            r2: mean_of(folds.iter().map(|f| reg(f).and_then(|r| r.r2))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EvalReport {
    pub fn from_folds(task: Task, folds: Vec<FoldResult>) -> Self {
        let mean = MeanMetrics::from_folds(&folds);
        Self { task, folds, mean }
    }

    pub const CSV_HEADER: &'static str = "fold,n_fit,n_val,n_test,best_epoch,stop_epoch,accuracy,baseline_accuracy,\
precision_none,precision_low,precision_medium,precision_high,recall_none,recall_low,recall_medium,recall_high,rmse,plcc,r2";

    /// One row per fold plus a `mean` row; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let metric_cells = |acc: Option<f64>,
                            base: Option<f64>,
                            p: &[Option<f64>],
                            r: &[Option<f64>],
                            rm,
                            pl,
                            r2| {
            let mut cells = vec![cell(acc), cell(base)];
            cells.extend(p.iter().map(|v| cell(*v)));
            cells.extend(r.iter().map(|v| cell(*v)));
            cells.extend([cell(rm), cell(pl), cell(r2)]);
            cells.join(",")
        };
        for f in &self.folds {
            let c = f.classification.as_ref();
            let r = f.regression.as_ref();
            let none = [None; CLASSES];
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                f.fold,
                f.n_fit,
                f.n_val,
                f.n_test,
                f.history.best_epoch,
                f.history.stop_epoch,
                metric_cells(
                    c.map(|c| c.accuracy),
                    f.baseline_accuracy,
                    c.map_or(&none, |c| &c.precision),
                    c.map_or(&none, |c| &c.recall),
                    r.map(|r| r.rmse),
                    r.and_then(|r| r.plcc),
                    r.and_then(|r| r.r2),
                )
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            s,
            "mean,,,,,,{}",
            metric_cells(
                m.accuracy,
                m.baseline_accuracy,
                &m.precision,
                &m.recall,
                m.rmse,
                m.plcc,
                m.r2
            )
        );
        s
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("fold,epoch,train_loss,val_loss\n");
        for f in &self.folds {
            for e in &f.history.epochs {
                let _ = writeln!(s, "{},{},{},{}", f.fold, e.epoch, e.train_loss, e.val_loss);
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("task: {}\nfolds: {}\n", self.task, self.folds.len());
        let m = &self.mean;
        match self.task {
            Task::Classification => {
                let _ = writeln!(s, "mean accuracy: {}", fmt(m.accuracy));
                let _ = writeln!(s, "majority baseline: {}", fmt(m.baseline_accuracy));
                for c in SeverityClass::ALL {
                    let _ = writeln!(
                        s,
                        "{:<7} precision {}  recall {}",
                        c.name(),
                        fmt(m.precision[c.index()]),
                        fmt(m.recall[c.index()])
                    );
                }
            }
            Task::Regression => {
                let _ = writeln!(
                    s,
                    "mean RMSE: {}\nmean PLCC: {}\nmean R2: {}",
                    fmt(m.rmse),
                    fmt(m.plcc),
                    fmt(m.r2)
                );
            }
        }
        for f in &self.folds {
            let _ = writeln!(
                s,
                "fold {}: {} fit / {} val / {} test, best epoch {} of {}",
                f.fold, f.n_fit, f.n_val, f.n_test, f.history.best_epoch, f.history.stop_epoch
            );
        }
        s
    }

    /// Writes `report.csv`, `history.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("history.csv"), self.history_csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

pub struct CvOutcome {
    pub report: EvalReport,
    pub audits: Vec<FoldAudit>,
}

fn majority_class(labels: &[SeverityClass]) -> SeverityClass {
    let mut counts = [0usize; CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    let best = (0..CLASSES).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
    SeverityClass::from_index(best).unwrap()
}

/// Trains and tests a fresh model per fold. Every fitted quantity (labels'
/// thresholds, z-score constants, validation subset) comes from the fold's
/// training partition.
pub fn run_cv(
    windows: &[PreparedWindow],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CvOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let seeds = SeedStream::new(train_cfg.seed);
    let folds = if train_cfg.participant_folds {
        let groups: Vec<String> = windows.iter().map(|w| w.participant.clone()).collect();
        group_kfold_split(&groups, train_cfg.folds, seeds.seed("folds"))?
    } else {
        kfold_split(windows.len(), train_cfg.folds, seeds.seed("folds"))?
    };
    let mut results = Vec::new();
    let mut audits = Vec::new();
    for (k, test) in folds.iter().enumerate() {
        let fold_seeds = seeds.child(&format!("fold{k}"));
        let train_part: Vec<usize> = (0..windows.len())
            .filter(|i| test.binary_search(i).is_err())
            .collect();
        let prep = fit_fold_preparation(windows, &train_part, train_cfg.norm_scope)?;
        let (fit, val) = validation_split(
            &train_part,
            train_cfg.val_fraction,
            &mut fold_seeds.rng("validation"),
        )?;

        let inputs: BTreeMap<usize, ModelInputs> = (0..windows.len())
            .map(|i| {
                Ok((
                    i,
                    prep.inputs(&windows[i], model_cfg.timestep, train_cfg.selection)?,
                ))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<SeverityClass> = windows
            .iter()
            .map(|w| prep.label(w))
            .collect::<Result<_>>()?;
        let targets = |idx: &[usize]| match model_cfg.task {
            Task::Classification => Targets::Classes(idx.iter().map(|&i| labels[i]).collect()),
            Task::Regression => Targets::Scores(idx.iter().map(|&i| windows[i].fms).collect()),
        };
        let dataset = |idx: &[usize]| Dataset {
            inputs: idx.iter().map(|i| &inputs[i]).collect(),
            targets: targets(idx),
        };

        let model = FusionModel::build(model_cfg, fold_seeds.seed("init"))?;
        let (model, history) = train(
            model,
            dataset(&fit),
            dataset(&val),
            train_cfg,
            &fold_seeds.child("train"),
        )?;

        let test_inputs: Vec<&ModelInputs> = test.iter().map(|i| &inputs[i]).collect();
        let mut preds = Vec::with_capacity(test.len());
        for chunk in test_inputs.chunks(train_cfg.batch_size) {
            preds.extend(model.predict(&Batch::stack(model_cfg, chunk)?)?);
        }
        let (classification, baseline_accuracy, regression) = match model_cfg.task {
            Task::Classification => {
                let predicted: Vec<SeverityClass> = preds
                    .iter()
                    .map(|p| match p {
                        Prediction::Class { class, .. } => *class,
                        Prediction::Score { .. } => unreachable!("classification model"),
                    })
                    .collect();
                let truth: Vec<SeverityClass> = test.iter().map(|&i| labels[i]).collect();
                let majority =
                    majority_class(&train_part.iter().map(|&i| labels[i]).collect::<Vec<_>>());
                let base =
                    truth.iter().filter(|&&c| c == majority).count() as f64 / truth.len() as f64;
                (
                    Some(evaluate_classification(&predicted, &truth)?),
                    Some(base),
                    None,
                )
            }
            Task::Regression => {
                let raw: Vec<f64> = preds
                    .iter()
                    .map(|p| match p {
                        Prediction::Score { fms, .. } => *fms,
                        Prediction::Class { .. } => unreachable!("regression model"),
                    })
                    .collect();
                let truth: Vec<f64> = test.iter().map(|&i| windows[i].fms).collect();
                (None, None, Some(evaluate_regression(&raw, &truth)?))
            }
        };
        log::info!("fold {}/{} done", k + 1, folds.len());
        results.push(FoldResult {
            fold: k + 1,
            n_fit: fit.len(),
            n_val: val.len(),
            n_test: test.len(),
            quantiles: prep.quantiles,
            classification,
            baseline_accuracy,
            regression,
            history,
        });
        audits.push(FoldAudit {
            fold: k + 1,
            test: test.clone(),
            train: train_part.clone(),
            fit,
            val,
            quantile_source: train_part.clone(),
            normalization_source: train_part,
        });
    }
    Ok(CvOutcome {
        report: EvalReport::from_folds(model_cfg.task, results),
        audits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Simulation;
    use crate::tensor::Tensor;

    pub(crate) fn toy_windows(n: usize) -> Vec<PreparedWindow> {
        (0..n)
            .map(|i| {
                let fms = (i % 8) as f64;
                let level = if fms > 3.0 { 1.0 } else { -1.0 };
                PreparedWindow {
                    id: format!("w{i}"),
                    participant: format!("p{}", i % 3),
                    simulation: Simulation::BeachCity,
                    t_report: 30.0 * (1 + i / 3) as f64,
                    fms,
                    eye: Tensor::from_fn(&[8, 9], |j| level + 0.1 * ((i * 31 + j * 7) % 11) as f64),
                    head: Tensor::from_fn(&[8, 4], |j| {
                        -level + 0.1 * ((i * 17 + j * 5) % 13) as f64
                    }),
                    video: None,
                    flow: None,
                    disparity: None,
                }
            })
            .collect()
    }

    fn toy_configs(task: Task) -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            task,
            timestep: 8,
            td_filters: 4,
            lstm_hidden: 4,
            branch_dense: 4,
            fusion_dense: 4,
            dropout: 0.0,
            recurrent_dropout: 0.0,
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            epochs: 3,
            batch_size: 8,
            folds: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        (m, t)
    }

    #[test]
    fn two_folds_two_models_and_audited_sources() {
        let windows = toy_windows(20);
        let (m, t) = toy_configs(Task::Classification);
        let out = run_cv(&windows, &m, &t).unwrap();
        assert_eq!(out.report.folds.len(), 2);
        let csv = out.report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        for a in &out.audits {
            assert!(a.test.iter().all(|i| !a.train.contains(i)));
            assert!(a.val.iter().all(|i| a.train.contains(i)));
            assert!(a
                .quantile_source
                .iter()
                .chain(&a.normalization_source)
                .all(|i| !a.test.contains(i)));
            assert_eq!(a.val.len(), (0.2 * a.train.len() as f64).round() as usize);
        }
        let acc: Vec<f64> = out
            .report
            .folds
            .iter()
            .map(|f| f.classification.as_ref().unwrap().accuracy)
            .collect();
        assert!((out.report.mean.accuracy.unwrap() - (acc[0] + acc[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let windows = toy_windows(16);
        let (m, t) = toy_configs(Task::Regression);
        let a = run_cv(&windows, &m, &t).unwrap().report;
        let b = run_cv(&windows, &m, &t).unwrap().report;
        assert_eq!(a, b);
        assert!(a.mean.rmse.is_some());
    }

    #[test]
    fn preparation_round_trips_through_key_values() {
        let windows = toy_windows(12);
        let prep = fit_fold_preparation(&windows, &(0..9).collect::<Vec<_>>(), NormScope::Session)
            .unwrap();
        assert_eq!(prep.sessions.len(), 3);
        assert_eq!(FoldPreparation::from_kv(&prep.to_kv()).unwrap(), prep);
    }

    #[test]
    fn preparation_ignores_held_out_windows() {
        let mut windows = toy_windows(12);
        let train: Vec<usize> = (0..8).collect();
        let a = fit_fold_preparation(&windows, &train, NormScope::Session).unwrap();
        for w in &mut windows[8..] {
            w.fms = 10.0;
            w.eye = w.eye.map(|v| v * 100.0);
        }
        assert_eq!(
            fit_fold_preparation(&windows, &train, NormScope::Session).unwrap(),
            a
        );
    }
}
