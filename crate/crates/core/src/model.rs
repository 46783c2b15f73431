//! Late-fusion network: a 3-D CNN branch per image modality, a
//! time-distributed CNN + LSTM branch per sensor stream, and a dense head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{join, parse_list, parse_value, KeyValues, KvConfig};
use crate::error::{Error, Result};
use crate::ingest::{EYE_FEATURES, HEAD_FEATURES};
use crate::labeling::{ModelInputs, SeverityClass, SUBSEQUENCES};
use crate::rng::{Rng, SeedStream};
use crate::tensor::{
    lstm_forward, BatchStats, BnMode, Graph, LstmOutput, Padding, ParamId, ParamStore, Tensor, Var,
};

pub const CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Video,
    Flow,
    Disparity,
    Eye,
    Head,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Video,
        Modality::Flow,
        Modality::Disparity,
        Modality::Eye,
        Modality::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Flow => "flow",
            Modality::Disparity => "disparity",
            Modality::Eye => "eye",
            Modality::Head => "head",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, Modality::Video | Modality::Flow | Modality::Disparity)
    }

    /// Channels of an image modality, features of a sensor stream.
    pub fn channels(self) -> usize {
        match self {
            Modality::Video | Modality::Flow => 3,
            Modality::Disparity => 1,
            Modality::Eye => EYE_FEATURES,
            Modality::Head => HEAD_FEATURES,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub task: Task,
    pub timestep: usize,
    pub frame_size: usize,
    /// Output channels of each conv3d block.
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub pool: usize,
    pub l2: f64,
    pub td_filters: usize,
    pub td_kernel: usize,
    /// One conv1d shared by all subsequences, or one per subsequence.
    pub td_shared: bool,
    pub dropout: f64,
    pub lstm_hidden: usize,
    pub recurrent_dropout: f64,
    pub branch_dense: usize,
    pub fusion_dense: usize,
    pub padding: Padding,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::Eye, Modality::Head],
            task: Task::Classification,
            timestep: 60,
            frame_size: 256,
            conv_filters: vec![16, 32, 64],
            conv_kernel: 3,
            pool: 2,
            l2: 0.01,
            td_filters: 64,
            td_kernel: 3,
            td_shared: true,
            dropout: 0.5,
            lstm_hidden: 128,
            recurrent_dropout: 0.2,
            branch_dense: 256,
            fusion_dense: 256,
            padding: Padding::Same,
            bn_momentum: 0.9,
            bn_eps: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Classification => CLASSES,
            Task::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modalities.is_empty() {
            return bad("at least one modality must be enabled".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("modalities listed twice".into());
        }
        let widths = [
            self.timestep,
            self.frame_size,
            self.conv_kernel,
            self.pool,
            self.td_filters,
            self.td_kernel,
            self.lstm_hidden,
            self.branch_dense,
            self.fusion_dense,
        ];
        if widths.contains(&0) || self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad("widths, kernels and sizes must be positive".into());
        }
        if self.timestep % SUBSEQUENCES != 0 {
            return bad(format!(
                "timestep {} is not a multiple of {SUBSEQUENCES}",
                self.timestep
            ));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("recurrent_dropout", self.recurrent_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} {rate} outside [0, 1)"));
            }
        }
        if !(self.l2 >= 0.0) || !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("l2, bn_momentum or bn_eps out of range".into());
        }
        if self.padding == Padding::Valid {
            let mut dims = [self.timestep, self.frame_size];
            for _ in &self.conv_filters {
                for d in &mut dims {
                    if *d < self.conv_kernel {
                        return bad(format!(
                            "valid padding shrinks a video axis below the kernel ({d})"
                        ));
                    }
                    *d = pooled(*d + 1 - self.conv_kernel, self.pool);
                }
            }
            if self.timestep / SUBSEQUENCES < self.td_kernel {
                return bad("valid padding: subsequence shorter than the conv1d kernel".into());
            }
        }
        Ok(())
    }

    /// Unbatched input shape expected for `m`.
    pub fn input_shape(&self, m: Modality) -> Vec<usize> {
        let s = self.frame_size;
        if m.is_image() {
            vec![self.timestep, s, s, m.channels()]
        } else {
            vec![SUBSEQUENCES, self.timestep / SUBSEQUENCES, m.channels()]
        }
    }

    /// Rejects inputs that lack an enabled modality or have a wrong shape.
    pub fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        for &m in &self.modalities {
            let t = modality_tensor(inputs, m)
                .ok_or_else(|| Error::Shape(format!("missing {m} input")))?;
            let want = self.input_shape(m);
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "{m} input {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Flattened width of a video branch.
    fn video_features(&self) -> usize {
        let mut dims = [self.timestep, self.frame_size, self.frame_size];
        for _ in &self.conv_filters {
            for d in &mut dims {
                let conv = match self.padding {
                    Padding::Same => *d,
                    Padding::Valid => *d + 1 - self.conv_kernel,
                };
                *d = pooled(conv, self.pool);
            }
        }
        dims.iter().product::<usize>() * self.conv_filters.last().unwrap()
    }

    fn sequence_length(&self) -> usize {
        let l = self.timestep / SUBSEQUENCES;
        let conv = match self.padding {
            Padding::Same => l,
            Padding::Valid => l + 1 - self.td_kernel,
        };
        pooled(conv, self.pool)
    }
}

/// Length after pooling with window and stride `pool`; the window shrinks to
/// fit axes shorter than it.
fn pooled(d: usize, pool: usize) -> usize {
    let w = pool.min(d);
    (d - w) / w + 1
}

fn modality_tensor(inputs: &ModelInputs, m: Modality) -> Option<&Tensor> {
    match m {
        Modality::Video => inputs.video.as_ref(),
        Modality::Flow => inputs.flow.as_ref(),
        Modality::Disparity => inputs.disparity.as_ref(),
        Modality::Eye => Some(&inputs.eye),
        Modality::Head => Some(&inputs.head),
    }
}

impl KvConfig for ModelConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "modalities" => self.modalities = parse_list(key, value)?,
            "task" => self.task = value.trim().parse()?,
            "timestep" => self.timestep = parse_value(key, value)?,
            "frame_size" => self.frame_size = parse_value(key, value)?,
            "conv_filters" => self.conv_filters = parse_list(key, value)?,
            "conv_kernel" => self.conv_kernel = parse_value(key, value)?,
            "pool" => self.pool = parse_value(key, value)?,
            "l2" => self.l2 = parse_value(key, value)?,
            "td_filters" => self.td_filters = parse_value(key, value)?,
            "td_kernel" => self.td_kernel = parse_value(key, value)?,
            "td_shared" => self.td_shared = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_value(key, value)?,
            "recurrent_dropout" => self.recurrent_dropout = parse_value(key, value)?,
            "branch_dense" => self.branch_dense = parse_value(key, value)?,
            "fusion_dense" => self.fusion_dense = parse_value(key, value)?,
            "padding" => self.padding = value.trim().parse()?,
            "bn_momentum" => self.bn_momentum = parse_value(key, value)?,
            "bn_eps" => self.bn_eps = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("modalities", join(&self.modalities));
        kv.set("task", self.task);
        kv.set("timestep", self.timestep);
        kv.set("frame_size", self.frame_size);
        kv.set("conv_filters", join(&self.conv_filters));
        kv.set("conv_kernel", self.conv_kernel);
        kv.set("pool", self.pool);
        kv.set("l2", self.l2);
        kv.set("td_filters", self.td_filters);
        kv.set("td_kernel", self.td_kernel);
        kv.set("td_shared", self.td_shared);
        kv.set("dropout", self.dropout);
        kv.set("lstm_hidden", self.lstm_hidden);
        kv.set("recurrent_dropout", self.recurrent_dropout);
        kv.set("branch_dense", self.branch_dense);
        kv.set("fusion_dense", self.fusion_dense);
        kv.set("padding", self.padding);
        kv.set("bn_momentum", self.bn_momentum);
        kv.set("bn_eps", self.bn_eps);
        kv
    }
}

#[derive(Clone, Debug)]
struct BatchNormParams {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    bn: BatchNormParams,
}

#[derive(Clone, Debug)]
struct SequenceBranch {
    /// One kernel when shared, otherwise one per subsequence.
    conv_kernels: Vec<(ParamId, ParamId)>,
    lstm_input: ParamId,
    lstm_recurrent: ParamId,
    lstm_bias: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
    bn: BatchNormParams,
}

#[derive(Clone, Debug)]
enum Branch {
    Video(Vec<ConvBlock>),
    Sequence(SequenceBranch),
}

/// Forward or inference behaviour of dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running-statistics update gathered during a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

pub struct Forward {
    /// `(N, 4)` probabilities or `(N, 1)` scores.
    pub output: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Batched inputs, one tensor per enabled modality with a leading batch axis.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub tensors: Vec<(Modality, Tensor)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tensors.first().map_or(0, |(_, t)| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| *k == m).map(|(_, t)| t)
    }

    /// Stacks the modalities `config` needs from each sample.
    pub fn stack(config: &ModelConfig, samples: &[&ModelInputs]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let mut tensors = Vec::new();
        for &m in &config.modalities {
            let parts = samples
                .iter()
                .map(|s| {
                    modality_tensor(s, m).ok_or_else(|| Error::Shape(format!("missing {m} input")))
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.push((m, Tensor::stack(&parts)?));
        }
        Ok(Batch { tensors })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class {
        class: SeverityClass,
        probs: [f64; CLASSES],
    },
    /// `fms` is clamped to [0, 10]; `raw` is the network output.
    Score { fms: f64, raw: f64 },
}

/// Reads one output row: argmax with lowest-index tie-break, or a clamped
/// score.
pub fn interpret_output(task: Task, row: &[f64]) -> Prediction {
    match task {
        Task::Classification => {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            let mut probs = [0.0; CLASSES];
            probs.copy_from_slice(&row[..CLASSES]);
            Prediction::Class {
                class: SeverityClass::from_index(best).expect("four outputs"),
                probs,
            }
        }
        Task::Regression => Prediction::Score {
            fms: row[0].clamp(0.0, 10.0),
            raw: row[0],
        },
    }
}

/// Targets for a batch: class labels or scores.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<SeverityClass>),
    Scores(Vec<f64>),
}

impl Targets {
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Targets::Classes(c) => {
                let mut t = Tensor::zeros(&[c.len(), CLASSES]);
                for (i, k) in c.iter().enumerate() {
                    t.data_mut()[i * CLASSES + k.index()] = 1.0;
                }
                t
            }
            Targets::Scores(s) => Tensor::from_parts(&[s.len(), 1], s.clone()).expect("n x 1"),
        }
    }
}

pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    branches: Vec<(Modality, Branch)>,
    fusion_w: ParamId,
    fusion_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

fn add_bn(store: &mut ParamStore, prefix: &str, c: usize) -> BatchNormParams {
    BatchNormParams {
        gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), true),
        beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
        running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
        running_var: store.add(
            format!("{prefix}.running_var"),
            Tensor::full(&[c], 1.0),
            false,
        ),
    }
}

impl FusionModel {
    /// Builds a freshly initialized network. Weights are Glorot-uniform,
    /// biases zero except the LSTM forget gate (one).
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed).rng("model.init");
        let mut store = ParamStore::new();
        let mut branches = Vec::new();
        let mut fused = 0;
        let k = config.conv_kernel;
        for &m in &config.modalities {
            let p = m.name();
            if m.is_image() {
                let mut cin = m.channels();
                let mut blocks = Vec::new();
                for (b, &cout) in config.conv_filters.iter().enumerate() {
                    let kernel = glorot(
                        &[k, k, k, cin, cout],
                        k * k * k * cin,
                        k * k * k * cout,
                        &mut rng,
                    );
                    blocks.push(ConvBlock {
                        kernel: store.add(format!("{p}.conv{b}.kernel"), kernel, true),
                        bias: store.add(format!("{p}.conv{b}.bias"), Tensor::zeros(&[cout]), true),
                        bn: add_bn(&mut store, &format!("{p}.conv{b}.bn"), cout),
                    });
                    cin = cout;
                }
                fused += config.video_features();
                branches.push((m, Branch::Video(blocks)));
            } else {
                let (f, c, tk, h) = (
                    m.channels(),
                    config.td_filters,
                    config.td_kernel,
                    config.lstm_hidden,
                );
                let copies = if config.td_shared { 1 } else { SUBSEQUENCES };
                let conv_kernels = (0..copies)
                    .map(|i| {
                        let w = glorot(&[tk, f, c], tk * f, tk * c, &mut rng);
                        (
                            store.add(format!("{p}.td{i}.kernel"), w, true),
                            store.add(format!("{p}.td{i}.bias"), Tensor::zeros(&[c]), true),
                        )
                    })
                    .collect();
                let lstm_in = config.sequence_length() * c;
                let mut bias = Tensor::zeros(&[4 * h]);
                bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                let d = config.branch_dense;
                branches.push((
                    m,
                    Branch::Sequence(SequenceBranch {
                        conv_kernels,
                        lstm_input: store.add(
                            format!("{p}.lstm.input"),
                            glorot(&[lstm_in, 4 * h], lstm_in, 4 * h, &mut rng),
                            true,
                        ),
                        lstm_recurrent: store.add(
                            format!("{p}.lstm.recurrent"),
                            glorot(&[h, 4 * h], h, 4 * h, &mut rng),
                            true,
                        ),
                        lstm_bias: store.add(format!("{p}.lstm.bias"), bias, true),
                        dense_w: store.add(
                            format!("{p}.dense.w"),
                            glorot(&[h, d], h, d, &mut rng),
                            true,
                        ),
                        dense_b: store.add(format!("{p}.dense.b"), Tensor::zeros(&[d]), true),
                        bn: add_bn(&mut store, &format!("{p}.bn"), d),
                    }),
                ));
                fused += d;
            }
        }
        let (fd, out) = (config.fusion_dense, config.outputs());
        let fusion_w = store.add("fusion.w", glorot(&[fused, fd], fused, fd, &mut rng), true);
        let fusion_b = store.add("fusion.b", Tensor::zeros(&[fd]), true);
        let out_w = store.add("output.w", glorot(&[fd, out], fd, out, &mut rng), true);
        let out_b = store.add("output.b", Tensor::zeros(&[out]), true);
        Ok(Self {
            config: config.clone(),
            params: store,
            branches,
            fusion_w,
            fusion_b,
            out_w,
            out_b,
        })
    }

    /// Total number of scalar parameters a config would allocate.
    pub fn parameter_count(config: &ModelConfig) -> usize {
        let k3 = config.conv_kernel.pow(3);
        let mut total = 0;
        let mut fused = 0;
        for &m in &config.modalities {
            if m.is_image() {
                let mut cin = m.channels();
                for &c in &config.conv_filters {
                    total += k3 * cin * c + c + 4 * c;
                    cin = c;
                }
                fused += config.video_features();
            } else {
                let (c, h, d) = (config.td_filters, config.lstm_hidden, config.branch_dense);
                let copies = if config.td_shared { 1 } else { SUBSEQUENCES };
                total += copies * (config.td_kernel * m.channels() * c + c);
                total +=
                    config.sequence_length() * c * 4 * h + h * 4 * h + 4 * h + h * d + d + 4 * d;
                fused += d;
            }
        }
        total
            + fused * config.fusion_dense
            + config.fusion_dense
            + config.fusion_dense * config.outputs()
            + config.outputs()
    }

    fn batchnorm(
        &self,
        g: &mut Graph,
        x: Var,
        bn: &BatchNormParams,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = g.param(&self.params, bn.gamma);
        let beta = g.param(&self.params, bn.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer {
                mean: self.params.get(bn.running_mean).value.data().to_vec(),
                var: self.params.get(bn.running_var).value.data().to_vec(),
            },
        };
        let (y, stats) = g.batchnorm(x, gamma, beta, &bn_mode, self.config.bn_eps)?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                mean: bn.running_mean,
                var: bn.running_var,
                stats,
            });
        }
        Ok(y)
    }

    fn video_branch(
        &self,
        g: &mut Graph,
        x: Var,
        blocks: &[ConvBlock],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let mut h = x;
        for b in blocks {
            let k = g.param(&self.params, b.kernel);
            let bias = g.param(&self.params, b.bias);
            h = g.conv3d(h, k, Some(bias), self.config.padding, self.config.l2)?;
            h = g.relu(h);
            let s = g.shape(h).to_vec();
            let win: Vec<usize> = s[1..4].iter().map(|&d| self.config.pool.min(d)).collect();
            h = g.maxpool(h, &win, &win)?;
            h = self.batchnorm(g, h, &b.bn, mode, updates)?;
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        g.reshape(h, &[n, flat])
    }

    fn sequence_branch(
        &self,
        g: &mut Graph,
        x: Var,
        br: &SequenceBranch,
        mode: Mode,
        rng: &mut Rng,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let train = mode == Mode::Train;
        let conv = |g: &mut Graph, input: Var, (k, b): (ParamId, ParamId)| -> Result<Var> {
            let k = g.param(&self.params, k);
            let b = g.param(&self.params, b);
            g.conv1d(input, k, Some(b), self.config.padding)
        };
        let mut h = if br.conv_kernels.len() == 1 {
            conv(g, x, br.conv_kernels[0])?
        } else {
            let parts = (0..SUBSEQUENCES)
                .map(|i| {
                    let sub = g.narrow(x, 1, i, 1)?;
                    conv(g, sub, br.conv_kernels[i])
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&parts, 1)?
        };
        h = g.relu(h);
        let len = g.shape(h)[2];
        let w = self.config.pool.min(len);
        h = g.maxpool(h, &[w], &[w])?;
        h = g.dropout(h, self.config.dropout, train, rng)?;
        let s = g.shape(h).to_vec();
        h = g.reshape(h, &[n, SUBSEQUENCES, s[2] * s[3]])?;
        let wi = g.param(&self.params, br.lstm_input);
        let wr = g.param(&self.params, br.lstm_recurrent);
        let lb = g.param(&self.params, br.lstm_bias);
        h = lstm_forward(
            g,
            h,
            wi,
            wr,
            lb,
            self.config.recurrent_dropout,
            train,
            rng,
            LstmOutput::Last,
        )?;
        let dw = g.param(&self.params, br.dense_w);
        let db = g.param(&self.params, br.dense_b);
        h = g.dense(h, dw, Some(db))?;
        self.batchnorm(g, h, &br.bn, mode, updates)
    }

    /// Runs the network on a batch. Dropout draws from `rng` in training
    /// mode only.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let n = batch.len();
        let mut updates = Vec::new();
        let mut features = Vec::new();
        for (m, branch) in &self.branches {
            let t = batch
                .get(*m)
                .ok_or_else(|| Error::Shape(format!("missing {m} input")))?;
            let mut want = vec![n];
            want.extend(self.config.input_shape(*m));
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "{m} batch {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            let x = g.constant(t.clone());
            let f = match branch {
                Branch::Video(blocks) => self.video_branch(g, x, blocks, mode, &mut updates)?,
                Branch::Sequence(br) => self.sequence_branch(g, x, br, mode, rng, &mut updates)?,
            };
            features.push(f);
        }
        let fused = if features.len() == 1 {
            features[0]
        } else {
            g.concat(&features, 1)?
        };
        let fw = g.param(&self.params, self.fusion_w);
        let fb = g.param(&self.params, self.fusion_b);
        let h = g.dense(fused, fw, Some(fb))?;
        let h = g.relu(h);
        let ow = g.param(&self.params, self.out_w);
        let ob = g.param(&self.params, self.out_b);
        let z = g.dense(h, ow, Some(ob))?;
        let output = match self.config.task {
            Task::Classification => g.softmax(z),
            Task::Regression => z,
        };
        Ok(Forward {
            output,
            bn_updates: updates,
        })
    }

    /// Task loss and task loss plus the kernel L2 penalty.
    pub fn loss(&self, g: &mut Graph, output: Var, targets: &Targets) -> Result<(Var, Var)> {
        let t = targets.to_tensor();
        let task = match (self.config.task, targets) {
            (Task::Classification, Targets::Classes(_)) => g.cross_entropy(output, &t)?,
            (Task::Regression, Targets::Scores(_)) => g.rmse(output, &t)?,
            _ => {
                return Err(Error::Contract(
                    "targets do not match the model task".into(),
                ))
            }
        };
        let total = match g.regularization() {
            Some(r) => g.add(task, r)?,
            None => task,
        };
        Ok((task, total))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let p = self.params.get_mut(id);
                for (r, v) in p.value.data_mut().iter_mut().zip(fresh) {
                    *r = m * *r + (1.0 - m) * v;
                }
            }
        }
    }

    /// Inference-mode outputs, one row per sample.
    pub fn outputs(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut rng = SeedStream::new(0).rng("unused");
        let f = self.forward(&mut g, batch, Mode::Infer, &mut rng)?;
        let k = self.config.outputs();
        Ok(g.value(f.output)
            .data()
            .chunks(k)
            .map(|r| r.to_vec())
            .collect())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        Ok(self
            .outputs(batch)?
            .iter()
            .map(|r| interpret_output(self.config.task, r))
            .collect())
    }

    /// Writes the parameters and a `key = value` sidecar with the config.
    pub fn save(&self, path: &Path, extra: &KeyValues) -> Result<()> {
        self.params.save(path)?;
        let mut kv = self.config.to_kv();
        kv.extend(extra);
        std::fs::write(sidecar_path(path), kv.to_text())?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint and returns the sidecar entries
    /// that are not model keys.
    pub fn load(path: &Path) -> Result<(Self, KeyValues)> {
        let kv = KeyValues::load(&sidecar_path(path))?;
        let keys = ModelConfig::keys();
        let mut model_kv = KeyValues::new();
        let mut rest = KeyValues::new();
        for (k, v) in kv.iter() {
            if keys.iter().any(|m| m == k) {
                model_kv.set(k, v);
            } else {
                rest.set(k, v);
            }
        }
        let config = ModelConfig::from_kv(&model_kv)?;
        let mut model = FusionModel::build(&config, 0)?;
        model.params.load(path)?;
        Ok((model, rest))
    }
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".cfg");
    p.into()
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
