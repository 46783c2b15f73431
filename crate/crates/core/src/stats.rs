//! Paired sickness / non-sickness comparisons and gaze heat maps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::{Simulation, EYE_FEATURES, HEAD_FEATURES};
use crate::labeling::{PreparedWindow, Window};

/// Reports at or below this FMS count as non-sickness.
pub const SICKNESS_THRESHOLD: f64 = 2.0;

/// Read-only view over a labeled window's raw sensor rows.
pub trait SampleView {
    fn participant(&self) -> &str;
    fn simulation(&self) -> Simulation;
    fn fms(&self) -> f64;
    /// Row-major `(samples, 9)`.
    fn eye_rows(&self) -> &[f64];
    /// Row-major `(samples, 4)`.
    fn head_rows(&self) -> &[f64];
}

impl SampleView for Window {
    fn participant(&self) -> &str {
        &self.participant
    }
    fn simulation(&self) -> Simulation {
        self.simulation
    }
    fn fms(&self) -> f64 {
        self.fms
    }
    fn eye_rows(&self) -> &[f64] {
        &self.eye
    }
    fn head_rows(&self) -> &[f64] {
        &self.head
    }
}

impl SampleView for PreparedWindow {
    fn participant(&self) -> &str {
        &self.participant
    }
    fn simulation(&self) -> Simulation {
        self.simulation
    }
    fn fms(&self) -> f64 {
        self.fms
    }
    fn eye_rows(&self) -> &[f64] {
        self.eye.data()
    }
    fn head_rows(&self) -> &[f64] {
        self.head.data()
    }
}

/// Scalar summaries of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    /// Mean of the two eyes' normalized gaze x.
    GazeX,
    GazeY,
    /// Mean of both pupil diameters, mm.
    Pupil,
    LeftPupil,
    RightPupil,
    /// Root of the summed variances of gaze x and y within the window.
    GazeDispersion,
    Convergence,
    HeadX,
    HeadY,
    HeadZ,
    HeadW,
}

impl Feature {
    pub const ALL: [Feature; 11] = [
        Feature::GazeX,
        Feature::GazeY,
        Feature::Pupil,
        Feature::LeftPupil,
        Feature::RightPupil,
        Feature::GazeDispersion,
        Feature::Convergence,
        Feature::HeadX,
        Feature::HeadY,
        Feature::HeadZ,
        Feature::HeadW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::GazeX => "gaze_x",
            Feature::GazeY => "gaze_y",
            Feature::Pupil => "pupil",
            Feature::LeftPupil => "left_pupil",
            Feature::RightPupil => "right_pupil",
            Feature::GazeDispersion => "gaze_dispersion",
            Feature::Convergence => "convergence",
            Feature::HeadX => "head_x",
            Feature::HeadY => "head_y",
            Feature::HeadZ => "head_z",
            Feature::HeadW => "head_w",
        }
    }

    /// Window-level value; `None` for a window without samples.
    pub fn extract(self, w: &impl SampleView) -> Option<f64> {
        let eye = w.eye_rows();
        let head = w.head_rows();
        let mean = |rows: &[f64], width: usize, f: &dyn Fn(&[f64]) -> f64| {
            let n = rows.len() / width;
            (n > 0).then(|| rows.chunks_exact(width).map(f).sum::<f64>() / n as f64)
        };
        match self {
            Feature::GazeX => mean(eye, EYE_FEATURES, &|r| (r[2] + r[5]) / 2.0),
            Feature::GazeY => mean(eye, EYE_FEATURES, &|r| (r[3] + r[6]) / 2.0),
            Feature::Pupil => mean(eye, EYE_FEATURES, &|r| (r[0] + r[1]) / 2.0),
            Feature::LeftPupil => mean(eye, EYE_FEATURES, &|r| r[0]),
            Feature::RightPupil => mean(eye, EYE_FEATURES, &|r| r[1]),
            Feature::Convergence => mean(eye, EYE_FEATURES, &|r| r[8]),
            Feature::GazeDispersion => {
                let pts = gaze_points(w);
                let n = pts.len() as f64;
                (!pts.is_empty()).then(|| {
                    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
                    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
                    (pts.iter()
                        .map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2))
                        .sum::<f64>()
                        / n)
                        .sqrt()
                })
            }
            Feature::HeadX => mean(head, HEAD_FEATURES, &|r| r[0]),
            Feature::HeadY => mean(head, HEAD_FEATURES, &|r| r[1]),
            Feature::HeadZ => mean(head, HEAD_FEATURES, &|r| r[2]),
            Feature::HeadW => mean(head, HEAD_FEATURES, &|r| r[3]),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature {s:?}")))
    }
}

/// Per-sample binocular gaze `(x, y)`: the mean of both eyes' directions.
pub fn gaze_points(w: &impl SampleView) -> Vec<(f64, f64)> {
    w.eye_rows()
        .chunks_exact(EYE_FEATURES)
        .map(|r| ((r[2] + r[5]) / 2.0, (r[3] + r[6]) / 2.0))
        .collect()
}

/// Per-participant condition means for one simulation, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedGroups {
    pub simulation: Simulation,
    pub feature: Feature,
    pub participants: Vec<String>,
    pub nonsick: Vec<f64>,
    pub sick: Vec<f64>,
}

/// Averages `feature` per participant under each condition, one group per
/// simulation present. Participants missing either condition are left out.
pub fn group_by_sickness<W: SampleView>(windows: &[W], feature: Feature) -> Vec<PairedGroups> {
    // (sim, participant) -> (nonsick sum, count, sick sum, count)
    let mut acc: BTreeMap<(Simulation, String), [f64; 4]> = BTreeMap::new();
    for w in windows {
        let Some(v) = feature.extract(w) else {
            continue;
        };
        let slot = acc
            .entry((w.simulation(), w.participant().to_string()))
            .or_default();
        let k = if w.fms() > SICKNESS_THRESHOLD { 2 } else { 0 };
        slot[k] += v;
        slot[k + 1] += 1.0;
    }
    let mut out: Vec<PairedGroups> = Vec::new();
    for ((sim, participant), [ns, nn, ss, sn]) in acc {
        if nn == 0.0 || sn == 0.0 {
            continue;
        }
        if out.last().map(|g| g.simulation) != Some(sim) {
            out.push(PairedGroups {
                simulation: sim,
                feature,
                participants: vec![],
                nonsick: vec![],
                sick: vec![],
            });
        }
        let g = out.last_mut().unwrap();
        g.participants.push(participant);
        g.nonsick.push(ns / nn);
        g.sick.push(ss / sn);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub n: usize,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Paired t-test on `a − b` with the sample (n−1) standard deviation.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired series of {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Empty(format!("{n} pairs, at least 2 needed")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (md, sd) = mean_sd(&d);
    if !(sd > 1e-300) || sd <= 1e-12 * md.abs() {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = md / (sd / (n as f64).sqrt());
    let df = n - 1;
    let (mean_a, sd_a) = mean_sd(a);
    let (mean_b, sd_b) = mean_sd(b);
    Ok(TTestResult {
        n,
        t,
        df,
        p: student_t_two_sided(t, df as f64),
        mean_a,
        sd_a,
        mean_b,
        sd_b,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let x = df / (df + t * t);
    regularized_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for num in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// One row of a per-simulation comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub simulation: Simulation,
    pub feature: Feature,
    pub result: Option<TTestResult>,
    pub pairs: usize,
}

/// Runs the paired comparison for every simulation and feature.
pub fn compare_conditions<W: SampleView>(
    windows: &[W],
    features: &[Feature],
) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for &feature in features {
        for g in group_by_sickness(windows, feature) {
            rows.push(ComparisonRow {
                simulation: g.simulation,
                feature,
                pairs: g.sick.len(),
                result: paired_ttest(&g.nonsick, &g.sick).ok(),
            });
        }
    }
    rows.sort_by_key(|r| (r.simulation, r.feature));
    rows
}

pub const COMPARISON_HEADER: &str = "feature,mean_nonsick,sd_nonsick,mean_sick,sd_sick,t,df,p";

/// CSV for one simulation; untestable rows keep empty statistics.
pub fn comparison_csv(rows: &[ComparisonRow], simulation: Simulation) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows.iter().filter(|r| r.simulation == simulation) {
        match &r.result {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.feature, t.mean_a, t.sd_a, t.mean_b, t.sd_b, t.t, t.df, t.p
                );
            }
            None => {
                let _ = writeln!(s, "{},,,,,,,", r.feature);
            }
        }
    }
    s
}

/// Square 2D histogram over `[−1, 1]²`; row 0 is the top (`y = +1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub counts: Vec<u64>,
    /// Counts divided by the largest bin; all zero when empty.
    pub intensity: Vec<f64>,
}

impl Heatmap {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.intensity.iter().map(|v| (v * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

fn bin(v: f64, size: usize) -> usize {
    let b = ((v + 1.0) / 2.0 * size as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(size - 1)
    }
}

/// Out-of-range samples land in the edge bins.
pub fn gaze_heatmap(points: &[(f64, f64)], size: usize) -> Result<Heatmap> {
    if size == 0 {
        return Err(Error::Config("heat map size must be positive".into()));
    }
    let mut counts = vec![0u64; size * size];
    for &(x, y) in points {
        counts[bin(-y, size) * size + bin(x, size)] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let intensity = counts
        .iter()
        .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
        .collect();
    Ok(Heatmap {
        size,
        counts,
        intensity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    /// Γ at integer and half-integer arguments from factorials.
    fn exact_gamma(twice: u32) -> f64 {
        if twice % 2 == 0 {
            (1..twice / 2).map(|k| k as f64).product()
        } else {
            let n = twice / 2;
            let num: f64 = (1..=2 * n).map(|k| k as f64).product();
            let den: f64 = 4f64.powi(n as i32) * (1..=n).map(|k| k as f64).product::<f64>();
            num / den * std::f64::consts::PI.sqrt()
        }
    }

    /// Two-sided p by Simpson integration of the t density over [0, |t|].
    fn integrated_p(t: f64, df: u32) -> f64 {
        let nu = df as f64;
        let c = exact_gamma(df + 1) / ((nu * std::f64::consts::PI).sqrt() * exact_gamma(df));
        let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = f(0.0) + f(t.abs());
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn hand_worked_fixture() {
        let r = paired_ttest(&[1.0, 2.0, 4.0], &[0.0, 1.0, 1.0]).unwrap();
        assert!((r.t - 2.5).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - integrated_p(2.5, 2)).abs() < 1e-6);
    }

    #[test]
    fn zero_mean_and_degenerate() {
        let r = paired_ttest(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(matches!(
            paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(paired_ttest(&[1.0], &[0.0]), Err(Error::Empty(_))));
        assert!(matches!(
            paired_ttest(&[1.0, 2.0], &[0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn p_matches_numerical_integration() {
        for df in [2u32, 10, 26] {
            for t in [0.1, 0.7, 1.5, 2.06, 3.0, 5.5] {
                let p = student_t_two_sided(t, df as f64);
                assert!((p - integrated_p(t, df)).abs() < 1e-6, "df {df} t {t}: {p}");
            }
        }
    }

    #[test]
    fn lanczos_against_factorials() {
        for twice in 1..40u32 {
            let g = exact_gamma(twice);
            assert!((ln_gamma(twice as f64 / 2.0) - g.ln()).abs() < 1e-12 * g.ln().abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn swap_negates_t_keeps_p(pairs in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 3..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(x), Ok(y)) = (paired_ttest(&a, &b), paired_ttest(&b, &a)) {
                prop_assert!((x.t + y.t).abs() <= 1e-12 * x.t.abs().max(1.0));
                prop_assert!((x.p - y.p).abs() < 1e-12);
            }
        }

        #[test]
        fn shift_leaves_t_and_p(pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..40), c in -100.0..100.0f64) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let sa: Vec<f64> = a.iter().map(|v| v + c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v + c).collect();
            if let Ok(x) = paired_ttest(&a, &b) {
                let y = paired_ttest(&sa, &sb).unwrap();
                prop_assert!((x.t - y.t).abs() <= 1e-9 * x.t.abs().max(1.0));
                prop_assert!((x.p - y.p).abs() < 1e-9);
            }
        }

        #[test]
        fn heatmap_counts_every_sample(points in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 0..300), g in 1usize..20) {
            let h = gaze_heatmap(&points, g).unwrap();
            prop_assert_eq!(h.total(), points.len() as u64);
            prop_assert!(h.intensity.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn heatmap_examples() {
        let h = gaze_heatmap(&vec![(0.0, 0.0); 10], 64).unwrap();
        assert_eq!(h.intensity.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(
            h.intensity.iter().filter(|&&v| v == 0.0).count(),
            64 * 64 - 1
        );
        assert!(gaze_heatmap(&[], 8)
            .unwrap()
            .intensity
            .iter()
            .all(|&v| v == 0.0));
        let h = gaze_heatmap(&[(5.0, 5.0), (-5.0, -5.0)], 4).unwrap();
        assert_eq!((h.counts[3], h.counts[12]), (1, 1));
    }

    #[test]
    fn uniform_samples_fill_bins_evenly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..100_000)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let h = gaze_heatmap(&pts, 8).unwrap();
        let expect = 100_000.0 / 64.0;
        assert!(h
            .counts
            .iter()
            .all(|&c| (c as f64 - expect).abs() < 0.2 * expect));
    }

    #[test]
    fn pgm_layout() {
        let h = gaze_heatmap(&[(0.9, 0.9)], 2).unwrap();
        let pgm = h.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 255, 0, 0]);
    }

    struct Fake {
        p: &'static str,
        fms: f64,
        eye: Vec<f64>,
    }

    impl SampleView for Fake {
        fn participant(&self) -> &str {
            self.p
        }
        fn simulation(&self) -> Simulation {
            Simulation::BeachCity
        }
        fn fms(&self) -> f64 {
            self.fms
        }
        fn eye_rows(&self) -> &[f64] {
            &self.eye
        }
        fn head_rows(&self) -> &[f64] {
            &[]
        }
    }

    fn pupil_window(p: &'static str, fms: f64, pupil: f64) -> Fake {
        let mut row = [0.0; EYE_FEATURES];
        row[0] = pupil;
        row[1] = pupil;
        Fake {
            p,
            fms,
            eye: row.repeat(3),
        }
    }

    #[test]
    fn grouping_pairs_and_exclusions() {
        let ws = vec![
            pupil_window("a", 1.0, 3.0),
            pupil_window("a", 5.0, 2.0),
            pupil_window("b", 0.0, 4.0),
            pupil_window("b", 2.0, 5.0),
            pupil_window("c", 3.0, 1.0),
            pupil_window("c", 7.0, 2.0),
            pupil_window("c", 2.0, 6.0),
        ];
        let g = group_by_sickness(&ws, Feature::Pupil);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].participants, ["a", "c"]);
        assert_eq!(g[0].nonsick, [3.0, 6.0]);
        assert_eq!(g[0].sick, [2.0, 1.5]);
    }

    #[test]
    fn dispersion_of_two_points() {
        let mut a = [0.0; EYE_FEATURES];
        let mut b = [0.0; EYE_FEATURES];
        (a[2], a[5], b[2], b[5]) = (0.5, 0.5, -0.5, -0.5);
        let w = Fake {
            p: "x",
            fms: 0.0,
            eye: [a, b].concat(),
        };
        assert!((Feature::GazeDispersion.extract(&w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn twenty_seven_pairs_give_26_df() {
        let a: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..27).map(|i| (i as f64 * 0.91).cos()).collect();
        assert_eq!(paired_ttest(&a, &b).unwrap().df, 26);
    }
}
