//! Training loop with early stopping, fold splitting, metrics and the
//! cross-validation harness.

mod cv;
mod metrics;

pub use self::metrics::{
    evaluate_classification, evaluate_regression, ClassificationMetrics, RegressionMetrics,
};
pub use cv::{
    fit_fold_preparation, run_cv, session_key, CvOutcome, EvalReport, FoldAudit, FoldPreparation,
    FoldResult, MeanMetrics,
};

use rand::seq::SliceRandom;

use crate::config::{parse_value, KeyValues, KvConfig};
use crate::error::{Error, Result};
use crate::labeling::{ModelInputs, Selection};
use crate::model::{Batch, FusionModel, Mode, Targets};
use crate::rng::{Rng, SeedStream};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub folds: usize,
    /// Split folds by participant instead of by window.
    pub participant_folds: bool,
    pub lr: f64,
    pub selection: Selection,
    pub norm_scope: NormScope,
    pub seed: u64,
}

/// Which training windows feed the z-score constants applied to a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormScope {
    /// The training windows of the same session.
    #[default]
    Session,
    /// All training windows pooled.
    Global,
}

impl std::str::FromStr for NormScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "session" => Ok(NormScope::Session),
            "global" => Ok(NormScope::Global),
            _ => Err(Error::Config(format!("unknown normalization scope {s:?}"))),
        }
    }
}

impl std::fmt::Display for NormScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormScope::Session => "session",
            NormScope::Global => "global",
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 512,
            patience: 20,
            val_fraction: 0.2,
            folds: 10,
            participant_folds: false,
            lr: 1e-3,
            selection: Selection::Last,
            norm_scope: NormScope::Session,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small settings for quick local runs.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.epochs == 0 || self.batch_size < 2 || self.folds < 2 {
            return Err(Error::Config(
                "patience and epochs must be ≥ 1, batch_size and folds ≥ 2".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "folds" => self.folds = parse_value(key, value)?,
            "participant_folds" => self.participant_folds = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "selection" => self.selection = value.trim().parse()?,
            "norm_scope" => self.norm_scope = value.trim().parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("patience", self.patience);
        kv.set("val_fraction", self.val_fraction);
        kv.set("folds", self.folds);
        kv.set("participant_folds", self.participant_folds);
        kv.set("lr", self.lr);
        kv.set("selection", self.selection);
        kv.set("norm_scope", self.norm_scope);
        kv.set("seed", self.seed);
        kv
    }
}

/// Sizes of `k` balanced parts of `n`: the first `n % k` get one extra.
fn part_sizes(n: usize, k: usize) -> impl Iterator<Item = usize> {
    (0..k).map(move |i| n / k + usize::from(i < n % k))
}

/// Shuffles `0..n` and cuts it into `k` disjoint test sets whose sizes
/// differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "cannot split {n} items into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedStream::new(seed).rng("folds"));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for size in part_sizes(n, k) {
        let mut f = idx[start..start + size].to_vec();
        f.sort_unstable();
        folds.push(f);
        start += size;
    }
    Ok(folds)
}

/// Folds that keep every group (participant) whole.
pub fn group_kfold_split(groups: &[String], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut unique: Vec<&String> = groups.iter().collect();
    unique.sort();
    unique.dedup();
    let assignment = kfold_split(unique.len(), k, seed)?;
    Ok(assignment
        .iter()
        .map(|members| {
            (0..groups.len())
                .filter(|&i| members.iter().any(|&m| unique[m] == &groups[i]))
                .collect()
        })
        .collect())
}

/// Splits a training partition into (fit, validation) index lists; the
/// validation share is `round(fraction · n)`, at least one.
pub fn validation_split(
    train: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if train.len() < 3 {
        return Err(Error::Empty(format!(
            "{} training windows cannot be split for validation",
            train.len()
        )));
    }
    let n_val = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len() - 2);
    let mut idx = train.to_vec();
    idx.shuffle(rng);
    let (val, fit) = idx.split_at(n_val);
    let (mut fit, mut val) = (fit.to_vec(), val.to_vec());
    fit.sort_unstable();
    val.sort_unstable();
    Ok((fit, val))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stopped_early: bool,
}

/// Something trainable one epoch at a time whose state can be saved and
/// put back.
pub trait Fit {
    type Snapshot;
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Runs epochs until `max_epochs` or until validation loss has not improved
/// for `patience` epochs, then restores the best parameters.
pub fn fit_with_early_stopping<F: Fit>(
    fit: &mut F,
    max_epochs: usize,
    patience: usize,
) -> Result<History> {
    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best = None;
    for epoch in 1..=max_epochs {
        let s = fit.run_epoch(epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: s.train_loss,
            val_loss: s.val_loss,
        });
        history.stop_epoch = epoch;
        if s.val_loss < history.best_val_loss {
            history.best_val_loss = s.val_loss;
            history.best_epoch = epoch;
            best = Some(fit.snapshot());
        } else if epoch - history.best_epoch >= patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        fit.restore(b);
    }
    Ok(history)
}

/// Inputs paired with targets.
pub struct Dataset<'a> {
    pub inputs: Vec<&'a ModelInputs>,
    pub targets: Targets,
}

impl Dataset<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn subset_targets(&self, idx: &[usize]) -> Targets {
        match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Scores(s) => Targets::Scores(idx.iter().map(|&i| s[i]).collect()),
        }
    }

    fn batch(&self, model: &FusionModel, idx: &[usize]) -> Result<(Batch, Targets)> {
        let samples: Vec<&ModelInputs> = idx.iter().map(|&i| self.inputs[i]).collect();
        Ok((
            Batch::stack(&model.config, &samples)?,
            self.subset_targets(idx),
        ))
    }
}

/// Cuts shuffled indices into batches; a trailing batch of one is merged
/// into its predecessor so batch statistics stay defined.
fn batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Mean task loss of `model` on `data` in inference mode.
pub fn evaluate_loss(model: &FusionModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for b in idx.chunks(batch_size.max(1)) {
        let (batch, targets) = data.batch(model, b)?;
        let mut g = Graph::new();
        let mut rng = SeedStream::new(0).rng("unused");
        let f = model.forward(&mut g, &batch, Mode::Infer, &mut rng)?;
        let (task, _) = model.loss(&mut g, f.output, &targets)?;
        let v = g.value(task).item();
        // rmse does not average linearly across batches; combine squares
        total += match targets {
            Targets::Scores(_) => v * v * b.len() as f64,
            Targets::Classes(_) => v * b.len() as f64,
        };
    }
    let mean = total / data.len() as f64;
    Ok(match data.targets {
        Targets::Scores(_) => mean.sqrt(),
        Targets::Classes(_) => mean,
    })
}

/// Adam training of one model on fixed fit/validation sets.
pub struct ModelFit<'a> {
    pub model: FusionModel,
    adam: AdamState,
    fit: Dataset<'a>,
    val: Dataset<'a>,
    batch_size: usize,
    shuffle_rng: Rng,
    dropout_rng: Rng,
}

impl<'a> ModelFit<'a> {
    pub fn new(
        model: FusionModel,
        fit: Dataset<'a>,
        val: Dataset<'a>,
        config: &TrainConfig,
        seeds: &SeedStream,
    ) -> Result<Self> {
        if fit.len() < 2 {
            return Err(Error::Empty(format!("{} training samples", fit.len())));
        }
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Ok(Self {
            model,
            adam,
            fit,
            val,
            batch_size: config.batch_size,
            shuffle_rng: seeds.rng("shuffle"),
            dropout_rng: seeds.rng("dropout"),
        })
    }
}

impl Fit for ModelFit<'_> {
    type Snapshot = Vec<Tensor>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.fit.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        for (bi, b) in batches(&order, self.batch_size).iter().enumerate() {
            let (batch, targets) = self.fit.batch(&self.model, b)?;
            let mut g = Graph::new();
            let f = self
                .model
                .forward(&mut g, &batch, Mode::Train, &mut self.dropout_rng)?;
            let (task, loss) = self.model.loss(&mut g, f.output, &targets)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi + 1,
                });
            }
            let grads = g.backward(loss)?;
            self.model.params.set_grads(&grads);
            self.adam.step(&mut self.model.params);
            self.model.apply_bn_updates(&f.bn_updates);
            total += g.value(task).item() * b.len() as f64;
        }
        let val_loss = if self.val.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(&self.model, &self.val, self.batch_size)?
        };
        if val_loss.is_nan() && !self.val.is_empty() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        Ok(EpochStats {
            train_loss: total / self.fit.len() as f64,
            val_loss,
        })
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.model
            .params
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect()
    }

    fn restore(&mut self, snapshot: Vec<Tensor>) {
        let ids: Vec<_> = self.model.params.ids().collect();
        for (id, v) in ids.into_iter().zip(snapshot) {
            self.model.params.get_mut(id).value = v;
        }
    }
}

/// Trains `model` with early stopping and returns it with its history.
pub fn train(
    model: FusionModel,
    fit: Dataset,
    val: Dataset,
    config: &TrainConfig,
    seeds: &SeedStream,
) -> Result<(FusionModel, History)> {
    config.validate()?;
    let mut state = ModelFit::new(model, fit, val, config, seeds)?;
    let history = fit_with_early_stopping(&mut state, config.epochs, config.patience)?;
    log::info!(
        "stopped at epoch {} (best {} with validation loss {:.4})",
        history.stop_epoch,
        history.best_epoch,
        history.best_val_loss
    );
    Ok((state.model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton_folds() {
        let f = kfold_split(10, 10, 3).unwrap();
        assert!(f.iter().all(|s| s.len() == 1));
        assert!(matches!(kfold_split(9, 10, 3), Err(Error::Config(_))));
    }

    #[test]
    fn full_size_fold_sizes() {
        let mut sizes: Vec<usize> = kfold_split(1755, 10, 1)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        sizes.sort_unstable();
        assert_eq!(
            sizes,
            vec![175, 175, 175, 175, 175, 176, 176, 176, 176, 176]
        );
    }

    #[test]
    fn seeds_control_partition() {
        assert_eq!(
            kfold_split(1000, 10, 5).unwrap(),
            kfold_split(1000, 10, 5).unwrap()
        );
        assert_ne!(
            kfold_split(1000, 10, 5).unwrap(),
            kfold_split(1000, 10, 6).unwrap()
        );
    }

    #[test]
    fn participant_folds_keep_groups_whole() {
        let groups: Vec<String> = (0..30).map(|i| format!("p{}", i % 6)).collect();
        let folds = group_kfold_split(&groups, 3, 2).unwrap();
        for f in &folds {
            for g in f.iter().map(|&i| &groups[i]) {
                assert!(
                    folds
                        .iter()
                        .filter(|o| o.iter().any(|&i| &groups[i] == g))
                        .count()
                        == 1
                );
            }
        }
        assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), 30);
    }

    #[test]
    fn validation_comes_from_training_partition() {
        let train: Vec<usize> = (100..150).collect();
        let (fit, val) = validation_split(&train, 0.2, &mut SeedStream::new(1).rng("v")).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(fit.len(), 40);
        assert!(val.iter().chain(&fit).all(|i| train.contains(i)));
        assert!(val.iter().all(|i| !fit.contains(i)));
    }

    #[test]
    fn lone_trailing_sample_joins_previous_batch() {
        let idx: Vec<usize> = (0..9).collect();
        let b = batches(&idx, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&idx[..8], 4).len(), 2);
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(n in 2usize..400, k in 2usize..12, seed in 0u64..1000) {
            prop_assume!(n >= k);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let max = folds.iter().map(Vec::len).max().unwrap();
            let min = folds.iter().map(Vec::len).min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }

    /// Replays a fixed validation-loss schedule.
    struct Scripted {
        losses: Vec<f64>,
        state: usize,
    }

    impl Fit for Scripted {
        type Snapshot = usize;
        fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
            self.state = epoch;
            Ok(EpochStats {
                train_loss: 0.0,
                val_loss: self.losses[epoch - 1],
            })
        }
        fn snapshot(&self) -> usize {
            self.state
        }
        fn restore(&mut self, s: usize) {
            self.state = s;
        }
    }

    #[test]
    fn plateau_stops_after_patience() {
        let losses: Vec<f64> = (1..=100)
            .map(|e| if e <= 5 { 10.0 - e as f64 } else { 5.0 })
            .collect();
        let mut s = Scripted { losses, state: 0 };
        let h = fit_with_early_stopping(&mut s, 100, 20).unwrap();
        assert_eq!(h.stop_epoch, 25);
        assert_eq!(h.best_epoch, 5);
        assert!(h.stopped_early);
        assert_eq!(s.state, 5);
    }

    #[test]
    fn steady_improvement_runs_to_the_end() {
        let mut s = Scripted {
            losses: (0..40).map(|e| 100.0 - e as f64).collect(),
            state: 0,
        };
        let h = fit_with_early_stopping(&mut s, 40, 20).unwrap();
        assert_eq!(
            (h.stop_epoch, h.best_epoch, h.stopped_early),
            (40, 40, false)
        );
    }

    proptest! {
        #[test]
        fn kept_parameters_are_never_worse_than_best(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..10) {
            let mut s = Scripted { losses: losses.clone(), state: 0 };
            let h = fit_with_early_stopping(&mut s, losses.len(), patience).unwrap();
            let seen = &losses[..h.stop_epoch];
            let best = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(losses[s.state - 1], best);
        }
    }
}
