//! Seeded synthetic sessions in the on-disk ingest format.
//!
//! Each session follows a latent sickness level `s(t)` that drifts upward
//! with exposure. FMS reports are noisy integer readings of it. Pupils
//! shrink, gaze spreads and head jitter grows in proportion to `s(t)`; stereo
//! frames show a textured scene translating at a speed set by `s(t)`.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{join, parse_list, parse_value, KeyValues, KvConfig};
use crate::error::{Error, Result};
use crate::ingest::{
    write_session, EyeSample, FmsReport, HeadSample, SessionRecord, Simulation, StereoFrame,
};
use crate::rng::{Rng, SeedStream};

/// Latent level at which the configured effect sizes are reached in full.
pub const EFFECT_REFERENCE_FMS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthProfile {
    pub participants: usize,
    pub simulations: Vec<Simulation>,
    pub duration_s: f64,
    pub cadence_s: f64,
    pub rate_hz: f64,
    /// SD of the report around the latent level before rounding.
    pub fms_noise: f64,
    /// Per-participant susceptibility is uniform on this range.
    pub susceptibility_min: f64,
    pub susceptibility_max: f64,
    /// Pupil constriction, mm.
    pub pupil_effect_mm: f64,
    /// Growth of the gaze angle SD, radians.
    pub gaze_effect: f64,
    /// Growth of the head rotation jitter SD, radians.
    pub head_effect: f64,
    /// Scales every measurement noise term; 0 gives noiseless streams.
    pub sensor_noise: f64,
    /// Per-sample probability of starting a three-sample blink (invalid eye row).
    pub blink_rate: f64,
    pub frames: bool,
    pub frame_size: usize,
    pub disparity_px: usize,
    /// Texture speed in pixels per frame at FMS 10.
    pub vection_px: f64,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            participants: 27,
            simulations: Simulation::ALL.to_vec(),
            duration_s: 420.0,
            cadence_s: 30.0,
            rate_hz: 20.0,
            fms_noise: 0.6,
            susceptibility_min: 0.2,
            susceptibility_max: 1.0,
            pupil_effect_mm: 0.4,
            gaze_effect: 0.05,
            head_effect: 0.02,
            sensor_noise: 1.0,
            blink_rate: 0.002,
            frames: false,
            frame_size: 256,
            disparity_px: 8,
            vection_px: 4.0,
            seed: 0,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.participants == 0 || self.simulations.is_empty() {
            return bad("profile needs at least one participant and simulation");
        }
        if !(self.cadence_s > 0.0) || !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) {
            return bad("duration, cadence and rate must be positive");
        }
        let ratio = self.duration_s / self.cadence_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("duration_s must be a multiple of cadence_s");
        }
        let effects = [
            self.pupil_effect_mm,
            self.gaze_effect,
            self.head_effect,
            self.fms_noise,
            self.sensor_noise,
        ];
        if effects.iter().any(|v| !(*v >= 0.0)) {
            return bad("effect sizes and noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.blink_rate) {
            return bad("blink_rate must lie in [0, 1]");
        }
        if !(0.0 <= self.susceptibility_min && self.susceptibility_min <= self.susceptibility_max) {
            return bad("susceptibility range is empty");
        }
        if self.frames && self.disparity_px + 2 >= self.frame_size {
            return bad("disparity_px must be smaller than frame_size");
        }
        Ok(())
    }

    pub fn participant_name(&self, index: usize) -> String {
        format!("p{:02}", index + 1)
    }
}

impl KvConfig for SynthProfile {
    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "participants" => self.participants = parse_value(key, value)?,
            "simulations" => self.simulations = parse_list(key, value)?,
            "duration_s" => self.duration_s = parse_value(key, value)?,
            "cadence_s" => self.cadence_s = parse_value(key, value)?,
            "rate_hz" => self.rate_hz = parse_value(key, value)?,
            "fms_noise" => self.fms_noise = parse_value(key, value)?,
            "susceptibility_min" => self.susceptibility_min = parse_value(key, value)?,
            "susceptibility_max" => self.susceptibility_max = parse_value(key, value)?,
            "pupil_effect_mm" => self.pupil_effect_mm = parse_value(key, value)?,
            "gaze_effect" => self.gaze_effect = parse_value(key, value)?,
            "head_effect" => self.head_effect = parse_value(key, value)?,
            "sensor_noise" => self.sensor_noise = parse_value(key, value)?,
            "blink_rate" => self.blink_rate = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "frame_size" => self.frame_size = parse_value(key, value)?,
            "disparity_px" => self.disparity_px = parse_value(key, value)?,
            "vection_px" => self.vection_px = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("participants", self.participants);
        kv.set("simulations", join(&self.simulations));
        kv.set("duration_s", self.duration_s);
        kv.set("cadence_s", self.cadence_s);
        kv.set("rate_hz", self.rate_hz);
        kv.set("fms_noise", self.fms_noise);
        kv.set("susceptibility_min", self.susceptibility_min);
        kv.set("susceptibility_max", self.susceptibility_max);
        kv.set("pupil_effect_mm", self.pupil_effect_mm);
        kv.set("gaze_effect", self.gaze_effect);
        kv.set("head_effect", self.head_effect);
        kv.set("sensor_noise", self.sensor_noise);
        kv.set("blink_rate", self.blink_rate);
        kv.set("frames", self.frames);
        kv.set("frame_size", self.frame_size);
        kv.set("disparity_px", self.disparity_px);
        kv.set("vection_px", self.vection_px);
        kv.set("seed", self.seed);
        kv
    }
}

/// How provocative each simulation is; scales the latent trajectory.
pub fn intensity(sim: Simulation) -> f64 {
    match sim {
        Simulation::BeachCity => 0.85,
        Simulation::RoadSide => 0.7,
        Simulation::FurnitureShop => 0.3,
        Simulation::SeaVoyage => 0.9,
        Simulation::RollerCoaster => 1.0,
    }
}

/// Traits shared by one participant across simulations.
#[derive(Clone, Copy, Debug)]
struct Person {
    susceptibility: f64,
    pupil_mm: f64,
    pupil_asymmetry: f64,
    convergence_mm: f64,
}

fn person(profile: &SynthProfile, participant: &str) -> Person {
    let mut rng = SeedStream::new(profile.seed).rng(&format!("participant/{participant}"));
    let (lo, hi) = (profile.susceptibility_min, profile.susceptibility_max);
    Person {
        susceptibility: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
        pupil_mm: 3.3 + 0.15 * normal(&mut rng),
        pupil_asymmetry: 0.05 * normal(&mut rng),
        convergence_mm: 800.0 + 100.0 * normal(&mut rng),
    }
}

fn normal(rng: &mut Rng) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sample(rng)
}

/// Stationary AR(1) step with unit-variance innovations scaled to `sd`.
fn ar1(prev: f64, phi: f64, sd: f64, rng: &mut Rng) -> f64 {
    phi * prev + sd * (1.0 - phi * phi).sqrt() * normal(rng)
}

/// Latent sickness at each grid time, non-decreasing in expectation.
fn latent_trajectory(profile: &SynthProfile, peak: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let dt = 1.0 / profile.rate_hz;
    let tau = 30.0;
    let phi = (-dt / tau).exp();
    let mut wobble = 0.0;
    (0..n)
        .map(|k| {
            let frac = (k as f64 * dt / profile.duration_s).min(1.0);
            wobble = ar1(wobble, phi, 0.4, rng);
            (peak * frac.powf(0.8) + wobble * frac.sqrt()).clamp(0.0, 10.0)
        })
        .collect()
}

fn unit_direction(yaw: f64, pitch: f64) -> [f64; 3] {
    [
        yaw.sin() * pitch.cos(),
        pitch.sin(),
        yaw.cos() * pitch.cos(),
    ]
}

fn quaternion(yaw: f64, pitch: f64, roll: f64) -> [f64; 4] {
    let (cy, sy) = ((yaw / 2.0).cos(), (yaw / 2.0).sin());
    let (cp, sp) = ((pitch / 2.0).cos(), (pitch / 2.0).sin());
    let (cr, sr) = ((roll / 2.0).cos(), (roll / 2.0).sin());
    let q = [
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
        cr * cp * cy + sr * sp * sy,
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Periodic value-noise texture with bilinear interpolation.
struct Texture {
    cells: usize,
    cell_px: f64,
    values: Vec<f64>,
}

impl Texture {
    fn new(rng: &mut Rng) -> Self {
        let cells = 32;
        Self {
            cells,
            cell_px: 3.0,
            values: (0..cells * cells * 3).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64, c: usize) -> f64 {
        let (u, v) = (x / self.cell_px, y / self.cell_px);
        let (fu, fv) = (u.floor(), v.floor());
        let (au, av) = (u - fu, v - fv);
        let n = self.cells as i64;
        let idx = |i: f64, j: f64| {
            let i = (i as i64).rem_euclid(n) as usize;
            let j = (j as i64).rem_euclid(n) as usize;
            self.values[(j * self.cells + i) * 3 + c]
        };
        let top = idx(fu, fv) * (1.0 - au) + idx(fu + 1.0, fv) * au;
        let bottom = idx(fu, fv + 1.0) * (1.0 - au) + idx(fu + 1.0, fv + 1.0) * au;
        top * (1.0 - av) + bottom * av
    }
}

/// A stereo pair whose right view is the left view shifted by `disparity`
/// pixels, so a left pixel at `x` appears at `x − disparity` on the right.
pub fn textured_pair(size: usize, disparity: usize, offset: f64, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let tex = Texture::new(&mut SeedStream::new(seed).rng("texture"));
    render_pair(&tex, size, disparity, offset)
}

fn render_pair(tex: &Texture, size: usize, disparity: usize, offset: f64) -> (Vec<u8>, Vec<u8>) {
    let mut left = Vec::with_capacity(size * size * 3);
    let mut right = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let l = tex.at(x as f64 + offset, y as f64, c);
                let r = tex.at((x + disparity) as f64 + offset, y as f64, c);
                left.push((l * 255.0).round() as u8);
                right.push((r * 255.0).round() as u8);
            }
        }
    }
    (left, right)
}

/// One session on the uniform grid `t = k / rate`, `k = 0 ..= duration·rate`,
/// with reports every `cadence_s` seconds.
pub fn generate_session(
    profile: &SynthProfile,
    participant: &str,
    simulation: Simulation,
) -> Result<SessionRecord> {
    profile.validate()?;
    let who = person(profile, participant);
    let seeds = SeedStream::new(profile.seed).child(&format!("session/{participant}/{simulation}"));
    let n = (profile.duration_s * profile.rate_hz + 1e-6).floor() as usize + 1;
    let dt = 1.0 / profile.rate_hz;
    let noise = profile.sensor_noise;
    let peak = 10.0 * who.susceptibility * intensity(simulation);
    let latent = latent_trajectory(profile, peak, n, &mut seeds.rng("latent"));
    let response = |s: f64| s / EFFECT_REFERENCE_FMS;

    let mut rng = seeds.rng("eye");
    let session_pupil = who.pupil_mm + 0.05 * noise * normal(&mut rng);
    let (mut pupil_drift, mut yaw, mut pitch, mut blink_left) = (0.0, 0.0, 0.0, 0usize);
    let eye: Vec<EyeSample> = (0..n)
        .map(|k| {
            let s = latent[k];
            let t = k as f64 * dt;
            pupil_drift = ar1(pupil_drift, 0.98, 0.08 * noise, &mut rng);
            let pupil = session_pupil - profile.pupil_effect_mm * response(s) + pupil_drift;
            let spread = 0.08 + profile.gaze_effect * response(s);
            yaw = ar1(yaw, 0.9, spread, &mut rng);
            pitch = ar1(pitch, 0.9, 0.6 * spread, &mut rng);
            let convergence =
                (who.convergence_mm * (1.0 + 0.05 * noise * normal(&mut rng))).max(200.0);
            let vergence = (32.0 / convergence).atan();
            let pl = pupil + who.pupil_asymmetry + 0.03 * noise * normal(&mut rng);
            let pr = pupil - who.pupil_asymmetry + 0.03 * noise * normal(&mut rng);
            if blink_left == 0 && profile.blink_rate > 0.0 && rng.gen::<f64>() < profile.blink_rate
            {
                blink_left = 3;
            }
            let blinking = blink_left > 0;
            blink_left = blink_left.saturating_sub(1);
            let mut sample = EyeSample {
                t,
                left_pupil_mm: if blinking { 0.0 } else { pl.clamp(1.0, 9.0) },
                right_pupil_mm: if blinking { 0.0 } else { pr.clamp(1.0, 9.0) },
                left_gaze: if blinking {
                    [0.0; 3]
                } else {
                    unit_direction(yaw + vergence, pitch)
                },
                right_gaze: if blinking {
                    [0.0; 3]
                } else {
                    unit_direction(yaw - vergence, pitch)
                },
                convergence_mm: convergence,
                valid: true,
            };
            sample.valid = sample.check();
            sample
        })
        .collect();

    let mut rng = seeds.rng("head");
    let (mut hy, mut hp, mut hr) = (0.0, 0.0, 0.0);
    let head: Vec<HeadSample> = (0..n)
        .map(|k| {
            let jitter = 0.01 * noise + profile.head_effect * response(latent[k]);
            hy = ar1(hy, 0.99, 0.2 * noise, &mut rng) + jitter * normal(&mut rng);
            hp = ar1(hp, 0.99, 0.1 * noise, &mut rng) + jitter * normal(&mut rng);
            hr = ar1(hr, 0.99, 0.05 * noise, &mut rng);
            HeadSample::new(k as f64 * dt, quaternion(hy, hp, hr))
        })
        .collect();

    let mut rng = seeds.rng("fms");
    let reports_n = (profile.duration_s / profile.cadence_s).round() as usize;
    let reports = (1..=reports_n)
        .map(|r| {
            let t = r as f64 * profile.cadence_s;
            let k = ((t * profile.rate_hz).round() as usize).min(n - 1);
            let score = (latent[k] + profile.fms_noise * normal(&mut rng))
                .round()
                .clamp(0.0, 10.0);
            FmsReport { t, score }
        })
        .collect();

    let frames = if profile.frames {
        let tex = Texture::new(&mut seeds.rng("texture"));
        let mut offset = 0.0;
        (0..n)
            .map(|k| {
                if k > 0 {
                    offset += profile.vection_px * latent[k] / 10.0;
                }
                let (left, right) =
                    render_pair(&tex, profile.frame_size, profile.disparity_px, offset);
                StereoFrame {
                    t: k as f64 * dt,
                    size: profile.frame_size,
                    left,
                    right,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(SessionRecord {
        participant: participant.to_string(),
        simulation,
        eye,
        head,
        frames,
        frames_present: profile.frames,
        reports,
        rate_hz: profile.rate_hz,
        aligned: false,
    })
}

/// Every (participant, simulation) pair in profile order.
pub fn session_plan(profile: &SynthProfile) -> Vec<(String, Simulation)> {
    (0..profile.participants)
        .flat_map(|p| profile.simulations.iter().map(move |&s| (p, s)))
        .map(|(p, s)| (profile.participant_name(p), s))
        .collect()
}

/// Generates all sessions in memory, in parallel.
pub fn generate_sessions(profile: &SynthProfile) -> Result<Vec<SessionRecord>> {
    profile.validate()?;
    session_plan(profile)
        .par_iter()
        .map(|(p, s)| generate_session(profile, p, *s))
        .collect()
}

/// Writes `<root>/<participant>/<Simulation>/` for every session and
/// returns the session directories in plan order.
pub fn generate_dataset(profile: &SynthProfile, root: &Path) -> Result<Vec<PathBuf>> {
    profile.validate()?;
    session_plan(profile)
        .par_iter()
        .map(|(p, sim)| {
            let dir = root.join(p).join(sim.name());
            write_session(&dir, &generate_session(profile, p, *sim)?)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align_streams, parse_session};
    use crate::labeling::build_windows;
    use crate::preprocess::{sgbm_disparity, GrayImage, SgbmParams};
    use crate::stats::{group_by_sickness, paired_ttest, Feature};

    fn short(participants: usize) -> SynthProfile {
        SynthProfile {
            participants,
            simulations: vec![Simulation::BeachCity],
            ..SynthProfile::default()
        }
    }

    #[test]
    fn two_by_one_gives_26_windows() {
        let sessions = generate_sessions(&short(2)).unwrap();
        let n: usize = sessions
            .iter()
            .map(|s| {
                build_windows(&align_streams(s, 20.0).unwrap())
                    .unwrap()
                    .windows
                    .len()
            })
            .sum();
        assert_eq!(n, 26);
    }

    #[test]
    fn noiseless_sessions_round_trip_without_invalid_samples() {
        let profile = SynthProfile {
            sensor_noise: 0.0,
            blink_rate: 0.0,
            duration_s: 60.0,
            ..short(1)
        };
        let tmp = tempfile::tempdir().unwrap();
        let dirs = generate_dataset(&profile, tmp.path()).unwrap();
        let parsed = parse_session(&dirs[0]).unwrap();
        assert_eq!(parsed.invalid_eye() + parsed.invalid_head(), 0);
        let direct = generate_session(&profile, "p01", Simulation::BeachCity).unwrap();
        assert_eq!(parsed, direct);
    }

    #[test]
    fn same_seed_same_files() {
        let profile = SynthProfile {
            duration_s: 60.0,
            ..short(2)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&profile, a.path()).unwrap();
        generate_dataset(&profile, b.path()).unwrap();
        for f in ["eye.csv", "head.csv", "fms.csv"] {
            let rel = Path::new("p02").join("BeachCity").join(f);
            assert_eq!(
                std::fs::read(a.path().join(&rel)).unwrap(),
                std::fs::read(b.path().join(&rel)).unwrap()
            );
        }
        let other = SynthProfile {
            seed: 1,
            ..profile.clone()
        };
        assert_ne!(
            generate_session(&profile, "p01", Simulation::BeachCity).unwrap(),
            generate_session(&other, "p01", Simulation::BeachCity).unwrap()
        );
    }

    #[test]
    fn scores_stay_in_range_and_rise() {
        let sessions = generate_sessions(&SynthProfile {
            participants: 10,
            ..SynthProfile::default()
        })
        .unwrap();
        let (mut first, mut last) = (0.0, 0.0);
        for s in &sessions {
            assert!(s.reports.iter().all(|r| (0.0..=10.0).contains(&r.score)));
            first += s.reports[0].score;
            last += s.reports.last().unwrap().score;
        }
        assert!(last > first + 2.0 * sessions.len() as f64);
    }

    #[test]
    fn injected_disparity_is_recovered() {
        for d in [4usize, 8] {
            let (l, r) = textured_pair(64, d, 0.0, 3);
            let left = GrayImage::from_rgb8(64, 64, &l).unwrap();
            let right = GrayImage::from_rgb8(64, 64, &r).unwrap();
            let map = sgbm_disparity(
                &left,
                &right,
                &SgbmParams {
                    max_disparity: 20,
                    ..SgbmParams::default()
                },
            )
            .unwrap();
            let mut ok = 0;
            let mut total = 0;
            for y in 8..56 {
                for x in 24..56 {
                    let i = y * 64 + x;
                    if map.valid[i] {
                        total += 1;
                        ok += usize::from((map.disparity[i] - d as f64).abs() <= 1.0);
                    }
                }
            }
            assert!(
                total > 0 && ok as f64 >= 0.9 * total as f64,
                "d={d}: {ok}/{total}"
            );
        }
    }

    #[test]
    fn pupils_shrink_only_with_an_effect() {
        for (effect, expect_signal) in [(0.4, true), (0.0, false)] {
            let profile = SynthProfile {
                pupil_effect_mm: effect,
                gaze_effect: if expect_signal { 0.05 } else { 0.0 },
                ..short(27)
            };
            let windows: Vec<_> = generate_sessions(&profile)
                .unwrap()
                .iter()
                .flat_map(|s| {
                    build_windows(&align_streams(s, 20.0).unwrap())
                        .unwrap()
                        .windows
                })
                .collect();
            let g = &group_by_sickness(&windows, Feature::Pupil)[0];
            let r = paired_ttest(&g.nonsick, &g.sick).unwrap();
            if expect_signal {
                assert!(r.p < 0.05 && r.mean_b < r.mean_a, "{r:?}");
            } else {
                assert!(r.p > 0.05, "{r:?}");
            }
        }
    }

    #[test]
    fn profile_round_trips_and_validates() {
        let p = SynthProfile {
            participants: 3,
            simulations: vec![Simulation::SeaVoyage],
            seed: 9,
            ..SynthProfile::default()
        };
        assert_eq!(SynthProfile::from_kv(&p.to_kv()).unwrap(), p);
        assert!(SynthProfile {
            duration_s: 100.0,
            ..SynthProfile::default()
        }
        .validate()
        .is_err());
        assert!(SynthProfile {
            pupil_effect_mm: -1.0,
            ..SynthProfile::default()
        }
        .validate()
        .is_err());
    }
}
