//! The `sickfuse` command line: argument parsing, run directories and
//! manifests. `main.rs` only forwards to [`main_with_args`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{KeyValues, KvConfig};
use crate::error::{Error, Result};
use crate::ingest::{align_streams, parse_session, Simulation, EYE_FEATURES, HEAD_FEATURES};
use crate::labeling::{build_windows, prepare_window, InputConfig, PreparedWindow, SeverityClass};
use crate::model::{Batch, FusionModel, ModelConfig, Prediction, Targets, Task};
use crate::preprocess::{read_window_cache, write_window_cache};
use crate::rng::SeedStream;
use crate::stats::{
    compare_conditions, comparison_csv, gaze_heatmap, gaze_points, Feature, SICKNESS_THRESHOLD,
};
use crate::synth::{generate_dataset, SynthProfile};
use crate::tensor::Tensor;
use crate::trainer::{
    fit_fold_preparation, run_cv, train, validation_split, Dataset, FoldPreparation, TrainConfig,
};

pub const MANIFEST: &str = "manifest.json";
const WINDOWS_CSV: &str = "windows.csv";
const DROPPED_CSV: &str = "dropped.csv";
const INPUT_CFG: &str = "input.cfg";
const CHECKPOINT: &str = "model.sfm";

#[derive(Debug, Parser)]
#[command(
    name = "sickfuse",
    version,
    about = "Cybersickness severity prediction from HMD sensor logs"
)]
pub struct Cli {
    /// Master seed; every random consumer derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Config overrides given as `--key value` after the fixed flags.
#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    /// `key = value` files, applied in order before the overrides.
    #[arg(long = "config")]
    pub config: Vec<PathBuf>,
    /// `--key value` pairs mirroring the config file keys.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    pub pairs: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Align sessions, cut labeled windows and cache model inputs.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one model on every cached window.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// K-fold cross-validation.
    Cv {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict cached windows with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Restrict to these window ids.
        #[arg(long = "window")]
        windows: Vec<String>,
        /// Restrict to one session, `participant/Simulation`.
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired sickness / non-sickness t-tests per simulation.
    Stats {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaze heat maps of one session split by FMS.
    Heatmap {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        participant: String,
        #[arg(long)]
        simulation: Simulation,
        #[arg(long, default_value_t = SICKNESS_THRESHOLD)]
        fms_threshold: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Cv { .. } => "cv",
            Command::Predict { .. } => "predict",
            Command::Stats { .. } => "stats",
            Command::Heatmap { .. } => "heatmap",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// SHA-256 of every output file, by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

/// Hashes every file below `dir` except the manifest.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let hashed: Vec<(String, String)> = files
        .par_iter()
        .map(|rel| {
            Ok((
                rel.to_string_lossy().replace('\\', "/"),
                sha256_file(&dir.join(rel))?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(hashed.into_iter().collect())
}

/// Applies config files, then `--key value` pairs, to a key/value set.
fn gather(overrides: &Overrides) -> Result<KeyValues> {
    let mut kv = KeyValues::new();
    for path in &overrides.config {
        kv.extend(&KeyValues::load(path)?);
    }
    let mut it = overrides.pairs.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, found {flag:?}")));
        };
        match key.split_once('=') {
            Some((k, v)) => kv.set(k, v),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                kv.set(key, v);
            }
        }
    }
    Ok(kv)
}

/// Sends each key to the first config that knows it.
fn route(kv: &KeyValues, targets: &mut [(&[String], &mut KeyValues)]) -> Result<()> {
    for (k, v) in kv.iter() {
        let slot = targets
            .iter_mut()
            .find(|(keys, _)| keys.iter().any(|x| x == k));
        match slot {
            Some((_, dst)) => dst.set(k, v),
            None => {
                return Err(Error::Config(format!(
                    "unknown key {k:?} (fixed flags must come before overrides)"
                )))
            }
        }
    }
    Ok(())
}

fn kv_map(kvs: &[(&str, &KeyValues)]) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (prefix, kv) in kvs {
        for (k, v) in kv.iter() {
            map.insert(format!("{prefix}{k}"), v.to_string());
        }
    }
    map
}

fn with_prefix(kv: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter() {
        out.set(&format!("{prefix}{k}"), v);
    }
    out
}

fn strip_prefix(kv: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.set(rest, v);
        }
    }
    out
}

struct Run {
    config: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
}

fn seed_map(master: u64, names: &[&str]) -> BTreeMap<String, u64> {
    let s = SeedStream::new(master);
    let mut m: BTreeMap<String, u64> = names.iter().map(|n| (n.to_string(), s.seed(n))).collect();
    m.insert("master".into(), master);
    m
}

/// Sessions below `root` as `<participant>/<Simulation>` directories, sorted.
pub fn find_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut participants: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    participants.sort();
    for p in participants {
        let mut sims: Vec<PathBuf> = fs::read_dir(&p)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| {
                d.is_dir()
                    && d.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.parse::<Simulation>().is_ok())
            })
            .collect();
        sims.sort();
        out.extend(sims);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "no sessions under {}",
            root.display()
        )));
    }
    Ok(out)
}

fn cmd_synth(out: &Path, overrides: &Overrides, seed: Option<u64>) -> Result<Run> {
    let mut profile = SynthProfile::from_kv(&gather(overrides)?)?;
    if let Some(s) = seed {
        profile.seed = s;
    }
    profile.validate()?;
    let dirs = generate_dataset(&profile, out)?;
    log::info!("wrote {} sessions to {}", dirs.len(), out.display());
    let kv = profile.to_kv();
    fs::write(out.join("profile.cfg"), kv.to_text())?;
    Ok(Run {
        config: kv_map(&[("", &kv)]),
        seeds: seed_map(profile.seed, &[]),
        inputs: vec![],
    })
}

fn cmd_preprocess(data: &Path, out: &Path, overrides: &Overrides) -> Result<Run> {
    let cfg = InputConfig::from_kv(&gather(overrides)?)?;
    cfg.validate()?;
    let sessions = find_sessions(data)?;
    fs::create_dir_all(out.join("windows"))?;
    let per_session: Vec<(Vec<String>, Vec<String>)> = sessions
        .par_iter()
        .map(|dir| {
            let session = align_streams(&parse_session(dir)?, crate::ingest::DEFAULT_RATE_HZ)?;
            let built = build_windows(&session)?;
            let mut rows = Vec::new();
            for w in &built.windows {
                let p = prepare_window(w, &cfg)?;
                write_window_cache(
                    &out.join("windows").join(format!("{}.sfw", p.id)),
                    &p.id,
                    &window_records(&p),
                )?;
                rows.push(format!(
                    "{},{},{},{},{},{},{},{}",
                    w.id,
                    w.participant,
                    w.simulation,
                    w.t_report,
                    w.fms,
                    w.samples(),
                    w.invalid_eye,
                    w.invalid_head
                ));
            }
            let dropped = built
                .dropped
                .iter()
                .map(|d| {
                    format!(
                        "{},{},{},{},{},{}",
                        d.id, session.participant, session.simulation, d.t_report, d.fms, d.reason
                    )
                })
                .collect();
            Ok((rows, dropped))
        })
        .collect::<Result<_>>()?;
    let mut windows =
        String::from("id,participant,simulation,t_report,fms,samples,invalid_eye,invalid_head\n");
    let mut dropped = String::from("id,participant,simulation,t_report,fms,reason\n");
    for (rows, drops) in per_session {
        for r in rows {
            windows.push_str(&r);
            windows.push('\n');
        }
        for d in drops {
            dropped.push_str(&d);
            dropped.push('\n');
        }
    }
    fs::write(out.join(WINDOWS_CSV), windows)?;
    fs::write(out.join(DROPPED_CSV), dropped)?;
    let kv = cfg.to_kv();
    fs::write(out.join(INPUT_CFG), kv.to_text())?;
    Ok(Run {
        config: kv_map(&[("", &kv)]),
        seeds: BTreeMap::new(),
        inputs: vec![data.to_path_buf()],
    })
}

fn window_records(p: &PreparedWindow) -> Vec<(String, Tensor)> {
    let mut r = vec![
        ("eye".to_string(), p.eye.clone()),
        ("head".to_string(), p.head.clone()),
    ];
    for (name, t) in [
        ("video", &p.video),
        ("flow", &p.flow),
        ("disparity", &p.disparity),
    ] {
        if let Some(t) = t {
            r.push((name.to_string(), t.clone()));
        }
    }
    r
}

/// Reads a preprocess output directory.
pub fn load_cache(dir: &Path) -> Result<(InputConfig, Vec<PreparedWindow>)> {
    let cfg = InputConfig::from_kv(&KeyValues::load(&dir.join(INPUT_CFG))?)?;
    let path = dir.join(WINDOWS_CSV);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingStream(path.clone()))?;
    let mut windows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::parse(WINDOWS_CSV, i + 1, m);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let (id, records) = read_window_cache(&dir.join("windows").join(format!("{}.sfw", f[0])))?;
        if id != f[0] {
            return Err(bad("cache file holds a different window"));
        }
        let take = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        let eye = take("eye").ok_or_else(|| bad("cache lacks eye rows"))?;
        let head = take("head").ok_or_else(|| bad("cache lacks head rows"))?;
        if eye.shape().get(1) != Some(&EYE_FEATURES) || head.shape().get(1) != Some(&HEAD_FEATURES)
        {
            return Err(Error::Shape(format!(
                "{id}: eye {:?}, head {:?}",
                eye.shape(),
                head.shape()
            )));
        }
        windows.push(PreparedWindow {
            id,
            participant: f[1].to_string(),
            simulation: f[2].parse().map_err(|_| bad("bad simulation"))?,
            t_report: f[3].parse().map_err(|_| bad("bad t_report"))?,
            fms: f[4].parse().map_err(|_| bad("bad fms"))?,
            eye,
            head,
            video: take("video"),
            flow: take("flow"),
            disparity: take("disparity"),
        });
    }
    if windows.is_empty() {
        return Err(Error::Empty(format!("{} lists no windows", path.display())));
    }
    Ok((cfg, windows))
}

/// Model and training configs for a cache: timestep and frame size follow
/// the cache unless overridden.
fn learning_configs(
    input: &InputConfig,
    overrides: &Overrides,
    seed: Option<u64>,
) -> Result<(ModelConfig, TrainConfig)> {
    let kv = gather(overrides)?;
    let model_keys = ModelConfig::keys();
    let train_keys = TrainConfig::keys();
    let (mut mkv, mut tkv) = (KeyValues::new(), KeyValues::new());
    route(&kv, &mut [(&model_keys, &mut mkv), (&train_keys, &mut tkv)])?;
    let mut model = ModelConfig {
        timestep: input.timestep,
        frame_size: input.frame_size,
        ..ModelConfig::default()
    };
    model.apply(&mkv)?;
    let mut train = TrainConfig {
        selection: input.selection,
        ..TrainConfig::desk()
    };
    train.apply(&tkv)?;
    if let Some(s) = seed {
        train.seed = s;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(cache: &Path, out: &Path, overrides: &Overrides, seed: Option<u64>) -> Result<Run> {
    let (input, windows) = load_cache(cache)?;
    let (model_cfg, train_cfg) = learning_configs(&input, overrides, seed)?;
    let all: Vec<usize> = (0..windows.len()).collect();
    let prep = fit_fold_preparation(&windows, &all, train_cfg.norm_scope)?;
    let seeds = SeedStream::new(train_cfg.seed);
    let (fit, val) = validation_split(&all, train_cfg.val_fraction, &mut seeds.rng("validation"))?;
    let inputs: Vec<_> = windows
        .iter()
        .map(|w| prep.inputs(w, model_cfg.timestep, train_cfg.selection))
        .collect::<Result<_>>()?;
    let targets = |idx: &[usize]| -> Result<Targets> {
        Ok(match model_cfg.task {
            Task::Classification => Targets::Classes(
                idx.iter()
                    .map(|&i| prep.label(&windows[i]))
                    .collect::<Result<_>>()?,
            ),
            Task::Regression => Targets::Scores(idx.iter().map(|&i| windows[i].fms).collect()),
        })
    };
    let fit_set = Dataset {
        inputs: fit.iter().map(|&i| &inputs[i]).collect(),
        targets: targets(&fit)?,
    };
    let val_set = Dataset {
        inputs: val.iter().map(|&i| &inputs[i]).collect(),
        targets: targets(&val)?,
    };
    let model = FusionModel::build(&model_cfg, seeds.seed("init"))?;
    let (model, history) = train(model, fit_set, val_set, &train_cfg, &seeds.child("train"))?;
    fs::create_dir_all(out)?;
    let mut extra = prep.to_kv();
    extra.extend(&with_prefix(&train_cfg.to_kv(), "train."));
    extra.extend(&with_prefix(&input.to_kv(), "input."));
    model.save(&out.join(CHECKPOINT), &extra)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for e in &history.epochs {
        let _ = writeln!(csv, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }
    fs::write(out.join("history.csv"), csv)?;
    fs::write(
        out.join("summary.txt"),
        format!(
            "windows: {} fit / {} validation\nbest epoch: {} of {}\nbest validation loss: {}\n",
            fit.len(),
            val.len(),
            history.best_epoch,
            history.stop_epoch,
            history.best_val_loss
        ),
    )?;
    Ok(Run {
        config: kv_map(&[
            ("model.", &model_cfg.to_kv()),
            ("train.", &train_cfg.to_kv()),
        ]),
        seeds: seed_map(train_cfg.seed, &["init", "validation", "train"]),
        inputs: vec![cache.to_path_buf()],
    })
}

fn cmd_cv(cache: &Path, out: &Path, overrides: &Overrides, seed: Option<u64>) -> Result<Run> {
    let (input, windows) = load_cache(cache)?;
    let (model_cfg, train_cfg) = learning_configs(&input, overrides, seed)?;
    let outcome = run_cv(&windows, &model_cfg, &train_cfg)?;
    outcome.report.write(out)?;
    let mut audit = String::from("fold,window,role\n");
    for a in &outcome.audits {
        for (role, idx) in [("test", &a.test), ("fit", &a.fit), ("validation", &a.val)] {
            for &i in idx {
                let _ = writeln!(audit, "{},{},{role}", a.fold, windows[i].id);
            }
        }
    }
    fs::write(out.join("folds.csv"), audit)?;
    Ok(Run {
        config: kv_map(&[
            ("model.", &model_cfg.to_kv()),
            ("train.", &train_cfg.to_kv()),
        ]),
        seeds: seed_map(train_cfg.seed, &["folds"]),
        inputs: vec![cache.to_path_buf()],
    })
}

fn cmd_predict(
    checkpoint: &Path,
    cache: &Path,
    ids: &[String],
    session: Option<&str>,
    out: &Path,
) -> Result<Run> {
    let (model, rest) = FusionModel::load(checkpoint)?;
    let prep = FoldPreparation::from_kv(&rest)?;
    let train_cfg = TrainConfig::from_kv(&strip_prefix(&rest, "train."))?;
    let (_, windows) = load_cache(cache)?;
    let chosen: Vec<&PreparedWindow> = windows
        .iter()
        .filter(|w| ids.is_empty() || ids.contains(&w.id))
        .filter(|w| session.is_none_or(|s| format!("{}/{}", w.participant, w.simulation) == s))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Empty(
            "no cached window matches the selection".into(),
        ));
    }
    for id in ids {
        if !windows.iter().any(|w| &w.id == id) {
            return Err(Error::Empty(format!("window {id} is not in the cache")));
        }
    }
    let inputs: Vec<_> = chosen
        .iter()
        .map(|w| prep.inputs(w, model.config.timestep, train_cfg.selection))
        .collect::<Result<_>>()?;
    let mut csv = match model.config.task {
        Task::Classification => String::from("id,participant,simulation,t_report,fms,true_class,class,p_none,p_low,p_medium,p_high\n"),
        Task::Regression => String::from("id,participant,simulation,t_report,fms,predicted_fms,raw\n"),
    };
    let refs: Vec<_> = inputs.iter().collect();
    let mut preds = Vec::new();
    for chunk in refs.chunks(64) {
        preds.extend(model.predict(&Batch::stack(&model.config, chunk)?)?);
    }
    for (w, p) in chosen.iter().zip(preds) {
        let _ = write!(
            csv,
            "{},{},{},{},{},",
            w.id, w.participant, w.simulation, w.t_report, w.fms
        );
        match p {
            Prediction::Class { class, probs } => {
                let truth: SeverityClass = prep.label(w)?;
                let _ = writeln!(
                    csv,
                    "{truth},{class},{},{},{},{}",
                    probs[0], probs[1], probs[2], probs[3]
                );
            }
            Prediction::Score { fms, raw } => {
                let _ = writeln!(csv, "{fms},{raw}");
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, csv)?;
    Ok(Run {
        config: kv_map(&[("model.", &model.config.to_kv())]),
        seeds: BTreeMap::new(),
        inputs: vec![checkpoint.to_path_buf(), cache.to_path_buf()],
    })
}

fn cmd_stats(cache: &Path, out: &Path) -> Result<Run> {
    let (_, windows) = load_cache(cache)?;
    let rows = compare_conditions(&windows, &Feature::ALL);
    fs::create_dir_all(out)?;
    let mut sims: Vec<Simulation> = windows.iter().map(|w| w.simulation).collect();
    sims.sort();
    sims.dedup();
    for sim in sims {
        fs::write(
            out.join(format!("stats_{sim}.csv")),
            comparison_csv(&rows, sim),
        )?;
    }
    Ok(Run {
        config: BTreeMap::new(),
        seeds: BTreeMap::new(),
        inputs: vec![cache.to_path_buf()],
    })
}

fn cmd_heatmap(
    cache: &Path,
    participant: &str,
    simulation: Simulation,
    threshold: f64,
    size: usize,
    out: &Path,
) -> Result<Run> {
    let (_, windows) = load_cache(cache)?;
    let session: Vec<&PreparedWindow> = windows
        .iter()
        .filter(|w| w.participant == participant && w.simulation == simulation)
        .collect();
    if session.is_empty() {
        return Err(Error::Empty(format!(
            "no windows for {participant}/{simulation}"
        )));
    }
    fs::create_dir_all(out)?;
    for (name, sick) in [("sick", true), ("nonsick", false)] {
        let pts: Vec<(f64, f64)> = session
            .iter()
            .filter(|w| (w.fms > threshold) == sick)
            .flat_map(|w| gaze_points(*w))
            .collect();
        gaze_heatmap(&pts, size)?.write_pgm(&out.join(format!("{name}.pgm")))?;
    }
    let mut config = BTreeMap::new();
    config.insert("fms_threshold".into(), threshold.to_string());
    config.insert("size".into(), size.to_string());
    Ok(Run {
        config,
        seeds: BTreeMap::new(),
        inputs: vec![cache.to_path_buf()],
    })
}

/// Runs one parsed command and writes its manifest. `args` is recorded
/// verbatim so the manifest can replay the run.
pub fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let started = now();
    let (run, out_dir, manifest_dir) = match &cli.command {
        Command::Synth { out, overrides } => (
            cmd_synth(out, overrides, cli.seed)?,
            out.clone(),
            out.clone(),
        ),
        Command::Preprocess {
            data,
            out,
            overrides,
        } => (
            cmd_preprocess(data, out, overrides)?,
            out.clone(),
            out.clone(),
        ),
        Command::Train {
            cache,
            out,
            overrides,
        } => (
            cmd_train(cache, out, overrides, cli.seed)?,
            out.clone(),
            out.clone(),
        ),
        Command::Cv {
            cache,
            out,
            overrides,
        } => (
            cmd_cv(cache, out, overrides, cli.seed)?,
            out.clone(),
            out.clone(),
        ),
        Command::Predict {
            checkpoint,
            cache,
            windows,
            session,
            out,
        } => {
            let run = cmd_predict(checkpoint, cache, windows, session.as_deref(), out)?;
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            (run, out.clone(), dir)
        }
        Command::Stats { cache, out } => (cmd_stats(cache, out)?, out.clone(), out.clone()),
        Command::Heatmap {
            cache,
            participant,
            simulation,
            fms_threshold,
            size,
            out,
        } => (
            cmd_heatmap(cache, participant, *simulation, *fms_threshold, *size, out)?,
            out.clone(),
            out.clone(),
        ),
        Command::Replay { manifest } => {
            let text = fs::read_to_string(manifest)?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            let mut argv = vec!["sickfuse".to_string()];
            argv.extend(m.args.iter().cloned());
            let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(e.to_string()))?;
            return execute(&cli, &m.args);
        }
    };
    let artifacts = if out_dir.is_file() {
        let name = out_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        BTreeMap::from([(name, sha256_file(&out_dir)?)])
    } else {
        checksums(&out_dir)?
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: args.to_vec(),
        config: run.config,
        seeds: run.seeds,
        inputs: run.inputs,
        outputs: vec![out_dir],
        started_unix: started,
        finished_unix: now(),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(&manifest_dir)?;
    fs::write(manifest_dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

/// Parses `argv` (program name first), runs it and returns the exit code.
/// Failures print one JSON object on stderr.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}
