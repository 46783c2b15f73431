//! Ground truth: report-anchored windows, quantile severity classes and the
//! conversion of a window into network inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KeyValues, KvConfig};
use crate::error::{Error, Result};
use crate::ingest::{SessionRecord, Simulation, StereoFrame, EYE_FEATURES, HEAD_FEATURES};
use crate::preprocess::{
    block_average, farneback_flow, flow_to_rgb, sgbm_disparity, ColumnScaler, FarnebackParams,
    FlowField, GrayImage, SgbmParams,
};
use crate::tensor::Tensor;

/// Seconds of history before the report that a window reaches back.
pub const HISTORY_S: usize = 10;
/// One-second segments per window, the report's own second included.
pub const SEGMENTS: usize = HISTORY_S + 1;
pub const SAMPLES_PER_SECOND: usize = 20;
pub const WINDOW_SAMPLES: usize = SEGMENTS * SAMPLES_PER_SECOND;
/// Largest tolerated share of held (invalid) samples per stream.
pub const MAX_INVALID_FRACTION: f64 = 0.2;
pub const SUBSEQUENCES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeverityClass {
    None,
    Low,
    Medium,
    High,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 4] = [
        SeverityClass::None,
        SeverityClass::Low,
        SeverityClass::Medium,
        SeverityClass::High,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityClass::None => "None",
            SeverityClass::Low => "Low",
            SeverityClass::Medium => "Medium",
            SeverityClass::High => "High",
        }
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown severity class {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileThresholds {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles of the training FMS distribution.
pub fn compute_fms_quantiles(scores: &[f64]) -> Result<QuantileThresholds> {
    if scores.is_empty() {
        return Err(Error::Empty("no FMS scores to take quantiles of".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Ok(QuantileThresholds {
        q1: quantile(&s, 0.25),
        q2: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
    })
}

/// Maps a score onto the four classes; a score equal to a threshold goes to
/// the lower class.
pub fn classify_severity(fms: f64, q: &QuantileThresholds) -> Result<SeverityClass> {
    if !(0.0..=10.0).contains(&fms) {
        return Err(Error::Range(fms));
    }
    Ok(if fms <= q.q1 {
        SeverityClass::None
    } else if fms <= q.q2 {
        SeverityClass::Low
    } else if fms <= q.q3 {
        SeverityClass::Medium
    } else {
        SeverityClass::High
    })
}

/// All streams of one report window, 220 aligned samples each.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub id: String,
    pub participant: String,
    pub simulation: Simulation,
    pub t_report: f64,
    pub fms: f64,
    pub severity: Option<SeverityClass>,
    /// Row-major `(samples, 9)`.
    pub eye: Vec<f64>,
    /// Row-major `(samples, 4)`.
    pub head: Vec<f64>,
    pub invalid_eye: usize,
    pub invalid_head: usize,
    /// Empty when the session has no video.
    pub frames: Vec<StereoFrame>,
}

impl Window {
    pub fn samples(&self) -> usize {
        self.eye.len() / EYE_FEATURES
    }
}

pub fn window_id(participant: &str, simulation: Simulation, t_report: f64) -> String {
    format!("{participant}_{simulation}_{:04}", t_report.round() as i64)
}

/// A report that did not yield a window, with the reason.
#[derive(Clone, Debug, PartialEq)]
pub struct DroppedWindow {
    pub id: String,
    pub t_report: f64,
    pub fms: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowBuild {
    pub windows: Vec<Window>,
    pub dropped: Vec<DroppedWindow>,
}

/// Cuts one window per report: the ten seconds before the report plus the
/// report's own second. Reports whose window leaves the session, or whose
/// streams are more than 20% held samples, are dropped with a reason.
pub fn build_windows(session: &SessionRecord) -> Result<WindowBuild> {
    if !session.aligned {
        return Err(Error::Contract(format!(
            "{}: windows need an aligned session",
            session.key()
        )));
    }
    let rate = session.rate_hz;
    let per_second = rate.round() as usize;
    let len = SEGMENTS * per_second;
    let total = session.eye.len().min(session.head.len());
    let mut out = WindowBuild::default();
    for r in &session.reports {
        let id = window_id(&session.participant, session.simulation, r.t);
        let drop = |reason: String| DroppedWindow {
            id: id.clone(),
            t_report: r.t,
            fms: r.score,
            reason,
        };
        let start = (r.t - HISTORY_S as f64) * rate;
        if start < -1e-9 || start.round() as usize + len > total {
            let d = drop("out_of_range".into());
            log::debug!(
                "{}: report at {} s has no complete window",
                session.key(),
                r.t
            );
            out.dropped.push(d);
            continue;
        }
        let start = start.round() as usize;
        let range = start..start + len;
        let invalid_eye = session.eye[range.clone()]
            .iter()
            .filter(|s| !s.valid)
            .count();
        let invalid_head = session.head[range.clone()]
            .iter()
            .filter(|s| !s.valid)
            .count();
        let worst = invalid_eye.max(invalid_head) as f64 / len as f64;
        if worst > MAX_INVALID_FRACTION {
            log::info!("{id}: dropped, {:.0}% invalid samples", worst * 100.0);
            out.dropped.push(drop(format!("invalid_{:.3}", worst)));
            continue;
        }
        out.windows.push(Window {
            id,
            participant: session.participant.clone(),
            simulation: session.simulation,
            t_report: r.t,
            fms: r.score,
            severity: None,
            eye: session.eye[range.clone()]
                .iter()
                .flat_map(|s| s.features())
                .collect(),
            head: session.head[range.clone()]
                .iter()
                .flat_map(|s| s.features())
                .collect(),
            invalid_eye,
            invalid_head,
            frames: if session.frames_present {
                session.frames[range].to_vec()
            } else {
                Vec::new()
            },
        });
    }
    Ok(out)
}

/// How `timestep` samples are picked out of a longer window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Selection {
    /// The final consecutive samples.
    #[default]
    Last,
    /// Evenly spaced samples ending at the final one.
    Stride,
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Selection::Last),
            "stride" => Ok(Selection::Stride),
            _ => Err(Error::Config(format!("unknown selection {s:?}"))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Last => "last",
            Selection::Stride => "stride",
        })
    }
}

/// Indices of the samples fed to the network.
pub fn select_indices(n: usize, timestep: usize, selection: Selection) -> Result<Vec<usize>> {
    if n < timestep {
        return Err(Error::ShortWindow {
            have: n,
            need: timestep,
        });
    }
    Ok(match selection {
        Selection::Last => (n - timestep..n).collect(),
        Selection::Stride => (0..timestep).map(|i| (i + 1) * n / timestep - 1).collect(),
    })
}

/// Settings for turning windows into network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InputConfig {
    pub timestep: usize,
    /// Side of the square frames fed to the network.
    pub frame_size: usize,
    pub selection: Selection,
    pub video: bool,
    pub flow: bool,
    pub disparity: bool,
    pub flow_params: FarnebackParams,
    pub sgbm: SgbmParams,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            timestep: 60,
            frame_size: 256,
            selection: Selection::Last,
            video: false,
            flow: false,
            disparity: false,
            flow_params: FarnebackParams::default(),
            sgbm: SgbmParams::default(),
        }
    }
}

impl InputConfig {
    pub fn any_frames(&self) -> bool {
        self.video || self.flow || self.disparity
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestep == 0 || self.timestep % SUBSEQUENCES != 0 {
            return Err(Error::Config(format!(
                "timestep {} must be a positive multiple of {SUBSEQUENCES}",
                self.timestep
            )));
        }
        if self.frame_size == 0 {
            return Err(Error::Config("frame_size must be positive".into()));
        }
        Ok(())
    }
}

impl KvConfig for InputConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "timestep" => self.timestep = parse_value(key, value)?,
            "frame_size" => self.frame_size = parse_value(key, value)?,
            "selection" => self.selection = value.trim().parse()?,
            "use_video" => self.video = parse_value(key, value)?,
            "use_flow" => self.flow = parse_value(key, value)?,
            "use_disparity" => self.disparity = parse_value(key, value)?,
            "flow_levels" => self.flow_params.levels = parse_value(key, value)?,
            "flow_window" => self.flow_params.window = parse_value(key, value)?,
            "flow_iterations" => self.flow_params.iterations = parse_value(key, value)?,
            "sgbm_max_disparity" => self.sgbm.max_disparity = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("timestep", self.timestep);
        kv.set("frame_size", self.frame_size);
        kv.set("selection", self.selection);
        kv.set("use_video", self.video);
        kv.set("use_flow", self.flow);
        kv.set("use_disparity", self.disparity);
        kv.set("flow_levels", self.flow_params.levels);
        kv.set("flow_window", self.flow_params.window);
        kv.set("flow_iterations", self.flow_params.iterations);
        kv.set("sgbm_max_disparity", self.sgbm.max_disparity);
        kv
    }
}

/// A window after the expensive image work: raw eye/head rows plus the
/// selected frames as `(T, S, S, C)` tensors scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow {
    pub id: String,
    pub participant: String,
    pub simulation: Simulation,
    pub t_report: f64,
    pub fms: f64,
    /// `(samples, 9)`, not normalized.
    pub eye: Tensor,
    /// `(samples, 4)`, not normalized.
    pub head: Tensor,
    pub video: Option<Tensor>,
    pub flow: Option<Tensor>,
    pub disparity: Option<Tensor>,
}

/// Per-session eye and head statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScalers {
    pub eye: ColumnScaler,
    pub head: ColumnScaler,
}

/// Network-ready tensors for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub video: Option<Tensor>,
    pub flow: Option<Tensor>,
    pub disparity: Option<Tensor>,
    /// `(4, T/4, 9)`.
    pub eye: Tensor,
    /// `(4, T/4, 4)`.
    pub head: Tensor,
}

fn downsample(data: Vec<f64>, size: usize, channels: usize, target: usize) -> Result<Vec<f64>> {
    if target > size || size % target != 0 {
        return Err(Error::Config(format!(
            "frame size {size} cannot be reduced to {target}"
        )));
    }
    Ok(block_average(&data, size, channels, size / target))
}

fn gray_left(f: &StereoFrame) -> Result<GrayImage> {
    GrayImage::from_rgb8(f.size, f.size, &f.left)
}

/// Computes the image modalities for the selected frames.
pub fn prepare_window(w: &Window, cfg: &InputConfig) -> Result<PreparedWindow> {
    cfg.validate()?;
    let n = w.samples();
    let eye = Tensor::new(&[n, EYE_FEATURES], w.eye.clone())?;
    let head = Tensor::new(&[n, HEAD_FEATURES], w.head.clone())?;
    let mut out = PreparedWindow {
        id: w.id.clone(),
        participant: w.participant.clone(),
        simulation: w.simulation,
        t_report: w.t_report,
        fms: w.fms,
        eye,
        head,
        video: None,
        flow: None,
        disparity: None,
    };
    if !cfg.any_frames() {
        return Ok(out);
    }
    if w.frames.len() != n {
        return Err(Error::Shape(format!(
            "{}: {} frames for {n} samples",
            w.id,
            w.frames.len()
        )));
    }
    let idx = select_indices(n, cfg.timestep, cfg.selection)?;
    let size = w.frames[0].size;
    let s = cfg.frame_size;
    let mut video = Vec::new();
    let mut flow = Vec::new();
    let mut disp = Vec::new();
    for &i in &idx {
        let f = &w.frames[i];
        if cfg.video {
            let px: Vec<f64> = f.left.iter().map(|&v| v as f64 / 255.0).collect();
            video.extend(downsample(px, size, 3, s)?);
        }
        if cfg.flow {
            let field = if i == 0 {
                FlowField::zeros(size, size)
            } else {
                farneback_flow(
                    &gray_left(&w.frames[i - 1])?,
                    &gray_left(f)?,
                    &cfg.flow_params,
                )?
            };
            let px: Vec<f64> = flow_to_rgb(&field)
                .iter()
                .map(|&v| v as f64 / 255.0)
                .collect();
            flow.extend(downsample(px, size, 3, s)?);
        }
        if cfg.disparity {
            let params = SgbmParams {
                max_disparity: cfg.sgbm.max_disparity.min(size.saturating_sub(1)),
                ..cfg.sgbm.clone()
            };
            let right = GrayImage::from_rgb8(f.size, f.size, &f.right)?;
            let map = sgbm_disparity(&gray_left(f)?, &right, &params)?;
            let scale = params.max_disparity.max(1) as f64;
            let px: Vec<f64> = map.disparity.iter().map(|d| d / scale).collect();
            disp.extend(downsample(px, size, 1, s)?);
        }
    }
    let t = cfg.timestep;
    if cfg.video {
        out.video = Some(Tensor::new(&[t, s, s, 3], video)?);
    }
    if cfg.flow {
        out.flow = Some(Tensor::new(&[t, s, s, 3], flow)?);
    }
    if cfg.disparity {
        out.disparity = Some(Tensor::new(&[t, s, s, 1], disp)?);
    }
    Ok(out)
}

fn sequence_input(rows: &Tensor, idx: &[usize], scaler: Option<&ColumnScaler>) -> Result<Tensor> {
    let f = rows.shape()[1];
    let mut data: Vec<f64> = idx
        .iter()
        .flat_map(|&i| rows.data()[i * f..(i + 1) * f].iter().copied())
        .collect();
    if let Some(s) = scaler {
        if s.columns.len() != f {
            return Err(Error::Shape(format!(
                "scaler has {} columns, rows have {f}",
                s.columns.len()
            )));
        }
        s.apply(&mut data);
    }
    Tensor::new(&[SUBSEQUENCES, idx.len() / SUBSEQUENCES, f], data)
}

impl PreparedWindow {
    /// Selects `timestep` rows, normalizes them and splits them into four
    /// consecutive subsequences. Image tensors pass through.
    pub fn model_inputs(
        &self,
        timestep: usize,
        selection: Selection,
        scalers: Option<&InputScalers>,
    ) -> Result<ModelInputs> {
        if timestep == 0 || timestep % SUBSEQUENCES != 0 {
            return Err(Error::Config(format!(
                "timestep {timestep} must be a positive multiple of {SUBSEQUENCES}"
            )));
        }
        let idx = select_indices(self.eye.shape()[0], timestep, selection)?;
        Ok(ModelInputs {
            video: self.video.clone(),
            flow: self.flow.clone(),
            disparity: self.disparity.clone(),
            eye: sequence_input(&self.eye, &idx, scalers.map(|s| &s.eye))?,
            head: sequence_input(&self.head, &idx, scalers.map(|s| &s.head))?,
        })
    }
}

/// Full conversion of a raw window into network inputs.
pub fn window_to_model_inputs(
    w: &Window,
    cfg: &InputConfig,
    scalers: Option<&InputScalers>,
) -> Result<ModelInputs> {
    if w.samples() < cfg.timestep {
        return Err(Error::ShortWindow {
            have: w.samples(),
            need: cfg.timestep,
        });
    }
    prepare_window(w, cfg)?.model_inputs(cfg.timestep, cfg.selection, scalers)
}
