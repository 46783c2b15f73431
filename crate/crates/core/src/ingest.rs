//! Session logs: parsing, validation, serialization and alignment onto a
//! uniform sampling grid.
//!
//! A session directory is `<participant>/<Simulation>/` and holds
//! `eye.csv`, `head.csv`, `fms.csv` and, optionally, `frames.bin` with its
//! `frames.idx` offset list.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const EYE_HEADER: &str =
    "t,left_pupil_mm,right_pupil_mm,lgx,lgy,lgz,rgx,rgy,rgz,convergence_mm";
pub const HEAD_HEADER: &str = "t,qx,qy,qz,qw";
pub const FMS_HEADER: &str = "t,score";
pub const FRAMES_MAGIC: &[u8; 4] = b"SFR1";
/// Resolution of frames stored in `frames.bin`.
pub const FRAME_SIZE: usize = 256;
pub const EYE_FEATURES: usize = 9;
pub const HEAD_FEATURES: usize = 4;
pub const DEFAULT_RATE_HZ: f64 = 20.0;
/// Longest stretch without valid samples that alignment will bridge.
pub const MAX_GAP_S: f64 = 0.5;

const UNIT_TOLERANCE: f64 = 1e-3;
const MAX_PUPIL_MM: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Simulation {
    BeachCity,
    RoadSide,
    FurnitureShop,
    SeaVoyage,
    RollerCoaster,
}

impl Simulation {
    pub const ALL: [Simulation; 5] = [
        Simulation::BeachCity,
        Simulation::RoadSide,
        Simulation::FurnitureShop,
        Simulation::SeaVoyage,
        Simulation::RollerCoaster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Simulation::BeachCity => "BeachCity",
            Simulation::RoadSide => "RoadSide",
            Simulation::FurnitureShop => "FurnitureShop",
            Simulation::SeaVoyage => "SeaVoyage",
            Simulation::RollerCoaster => "RollerCoaster",
        }
    }
}

impl fmt::Display for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Simulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Simulation::ALL
            .into_iter()
            .find(|sim| sim.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown simulation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EyeSample {
    pub t: f64,
    pub left_pupil_mm: f64,
    pub right_pupil_mm: f64,
    pub left_gaze: [f64; 3],
    pub right_gaze: [f64; 3],
    pub convergence_mm: f64,
    pub valid: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn is_unit(v: &[f64]) -> bool {
    (norm(v) - 1.0).abs() <= UNIT_TOLERANCE
}

impl EyeSample {
    /// Left/right pupil, left gaze xyz, right gaze xyz, convergence.
    pub fn features(&self) -> [f64; EYE_FEATURES] {
        let [lx, ly, lz] = self.left_gaze;
        let [rx, ry, rz] = self.right_gaze;
        [
            self.left_pupil_mm,
            self.right_pupil_mm,
            lx,
            ly,
            lz,
            rx,
            ry,
            rz,
            self.convergence_mm,
        ]
    }

    fn from_features(t: f64, f: &[f64]) -> Self {
        let mut s = EyeSample {
            t,
            left_pupil_mm: f[0],
            right_pupil_mm: f[1],
            left_gaze: [f[2], f[3], f[4]],
            right_gaze: [f[5], f[6], f[7]],
            convergence_mm: f[8],
            valid: true,
        };
        s.valid = s.check();
        s
    }

    /// Plausibility: finite values, pupils in (0, 12] mm, unit gaze vectors.
    pub fn check(&self) -> bool {
        let pupil_ok = |p: f64| p > 0.0 && p <= MAX_PUPIL_MM;
        self.features().iter().all(|v| v.is_finite())
            && pupil_ok(self.left_pupil_mm)
            && pupil_ok(self.right_pupil_mm)
            && is_unit(&self.left_gaze)
            && is_unit(&self.right_gaze)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSample {
    pub t: f64,
    /// `(x, y, z, w)`.
    pub quat: [f64; 4],
    pub valid: bool,
}

impl HeadSample {
    pub fn new(t: f64, quat: [f64; 4]) -> Self {
        let valid = quat.iter().all(|v| v.is_finite()) && is_unit(&quat);
        Self { t, quat, valid }
    }

    pub fn features(&self) -> [f64; HEAD_FEATURES] {
        self.quat
    }
}

/// A stereo pair of square RGB8 images, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub t: f64,
    pub size: usize,
    pub left: Vec<u8>,
    pub right: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmsReport {
    pub t: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub participant: String,
    pub simulation: Simulation,
    pub eye: Vec<EyeSample>,
    pub head: Vec<HeadSample>,
    pub frames: Vec<StereoFrame>,
    /// False when the session was recorded without video.
    pub frames_present: bool,
    pub reports: Vec<FmsReport>,
    pub rate_hz: f64,
    /// True once streams sit on the uniform grid.
    pub aligned: bool,
}

impl SessionRecord {
    /// Directory-friendly identifier `participant/Simulation`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.participant, self.simulation)
    }

    /// Covered time span: the earliest stream end.
    pub fn duration(&self) -> f64 {
        let mut ends = vec![
            self.eye.last().map_or(0.0, |s| s.t),
            self.head.last().map_or(0.0, |s| s.t),
        ];
        if self.frames_present {
            ends.push(self.frames.last().map_or(0.0, |f| f.t));
        }
        ends.into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn invalid_eye(&self) -> usize {
        self.eye.iter().filter(|s| !s.valid).count()
    }

    pub fn invalid_head(&self) -> usize {
        self.head.iter().filter(|s| !s.valid).count()
    }
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn open_required(path: &Path) -> Result<fs::File> {
    if !path.is_file() {
        return Err(Error::MissingStream(path.to_path_buf()));
    }
    Ok(fs::File::open(path)?)
}

/// Parses a numeric CSV with an exact header; yields `(line number, values)`.
fn read_csv(path: &Path, header: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let label = file_label(path);
    let columns = header.split(',').count();
    let mut lines = BufReader::new(open_required(path)?).lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.trim() != header {
        return Err(Error::parse(
            &label,
            1,
            format!("expected header {header:?}"),
        ));
    }
    let mut rows = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(&label, lineno, format!("bad number {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != columns {
            return Err(Error::parse(
                &label,
                lineno,
                format!("expected {columns} fields, found {}", values.len()),
            ));
        }
        let t = values[0];
        if !t.is_finite() || t < 0.0 {
            return Err(Error::parse(&label, lineno, format!("bad timestamp {t}")));
        }
        if t <= last_t {
            return Err(Error::Order {
                file: label,
                line: lineno,
            });
        }
        last_t = t;
        rows.push((lineno, values));
    }
    Ok(rows)
}

fn frame_bytes(size: usize) -> usize {
    size * size * 3
}

fn read_frames(dir: &Path) -> Result<Option<Vec<StereoFrame>>> {
    let bin = dir.join("frames.bin");
    let idx = dir.join("frames.idx");
    match (bin.is_file(), idx.is_file()) {
        (false, false) => return Ok(None),
        (true, false) => return Err(Error::MissingStream(idx)),
        (false, true) => return Err(Error::MissingStream(bin)),
        (true, true) => {}
    }
    let mut offsets = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(&idx)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        offsets.push(
            line.trim()
                .parse::<u64>()
                .map_err(|_| Error::parse("frames.idx", i + 1, format!("bad offset {line:?}")))?,
        );
    }
    let mut f = BufReader::new(fs::File::open(&bin)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::parse("frames.bin", 0, "truncated header"))?;
    if &magic != FRAMES_MAGIC {
        return Err(Error::parse("frames.bin", 0, "bad magic"));
    }
    let n = frame_bytes(FRAME_SIZE);
    let mut frames: Vec<StereoFrame> = Vec::with_capacity(offsets.len());
    for (i, &off) in offsets.iter().enumerate() {
        f.seek(SeekFrom::Start(off))?;
        let mut tb = [0u8; 8];
        let mut left = vec![0u8; n];
        let mut right = vec![0u8; n];
        f.read_exact(&mut tb)
            .and_then(|_| f.read_exact(&mut left))
            .and_then(|_| f.read_exact(&mut right))
            .map_err(|_| {
                Error::parse(
                    "frames.bin",
                    i + 1,
                    format!("truncated frame at offset {off}"),
                )
            })?;
        let t = f64::from_le_bytes(tb);
        if !t.is_finite() || frames.last().is_some_and(|p| t <= p.t) {
            return Err(Error::Order {
                file: "frames.bin".into(),
                line: i + 1,
            });
        }
        frames.push(StereoFrame {
            t,
            size: FRAME_SIZE,
            left,
            right,
        });
    }
    Ok(Some(frames))
}

/// Reads one session directory. Participant and simulation come from the
/// directory path. Implausible eye/head samples are kept but flagged.
pub fn parse_session(dir: &Path) -> Result<SessionRecord> {
    let simulation: Simulation = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("")
        .parse()
        .map_err(|_| {
            Error::parse(
                dir.display().to_string(),
                0,
                "directory name is not a simulation",
            )
        })?;
    let participant = dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("unknown")
        .to_string();

    let eye = read_csv(&dir.join("eye.csv"), EYE_HEADER)?
        .into_iter()
        .map(|(_, v)| EyeSample::from_features(v[0], &v[1..]))
        .collect();
    let head = read_csv(&dir.join("head.csv"), HEAD_HEADER)?
        .into_iter()
        .map(|(_, v)| HeadSample::new(v[0], [v[1], v[2], v[3], v[4]]))
        .collect();
    let mut reports = Vec::new();
    for (line, v) in read_csv(&dir.join("fms.csv"), FMS_HEADER)? {
        let score = v[1];
        if !(0.0..=10.0).contains(&score) {
            return Err(Error::parse(
                "fms.csv",
                line,
                format!("score {score} outside [0, 10]"),
            ));
        }
        reports.push(FmsReport { t: v[0], score });
    }
    let frames = read_frames(dir)?;
    Ok(SessionRecord {
        participant,
        simulation,
        eye,
        head,
        frames_present: frames.is_some(),
        frames: frames.unwrap_or_default(),
        reports,
        rate_hz: DEFAULT_RATE_HZ,
        aligned: false,
    })
}

fn write_csv<const N: usize>(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = (f64, [f64; N])>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for (t, values) in rows {
        write!(w, "{t}")?;
        for v in values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `session` into `dir` using the on-disk schemas. Floats use the
/// shortest exact representation, so parsing the output reproduces the
/// values bit for bit.
pub fn write_session(dir: &Path, session: &SessionRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("eye.csv"),
        EYE_HEADER,
        session.eye.iter().map(|s| (s.t, s.features())),
    )?;
    write_csv(
        &dir.join("head.csv"),
        HEAD_HEADER,
        session.head.iter().map(|s| (s.t, s.quat)),
    )?;
    write_csv(
        &dir.join("fms.csv"),
        FMS_HEADER,
        session.reports.iter().map(|r| (r.t, [r.score])),
    )?;
    if session.frames_present {
        write_frames(dir, &session.frames)?;
    }
    Ok(())
}

pub fn write_frames(dir: &Path, frames: &[StereoFrame]) -> Result<()> {
    let n = frame_bytes(FRAME_SIZE);
    let mut bin = BufWriter::new(fs::File::create(dir.join("frames.bin"))?);
    let mut idx = BufWriter::new(fs::File::create(dir.join("frames.idx"))?);
    bin.write_all(FRAMES_MAGIC)?;
    let mut offset = FRAMES_MAGIC.len() as u64;
    for f in frames {
        if f.size != FRAME_SIZE || f.left.len() != n || f.right.len() != n {
            return Err(Error::Shape(format!(
                "frames.bin stores {FRAME_SIZE}x{FRAME_SIZE} RGB8 pairs, got size {}",
                f.size
            )));
        }
        writeln!(idx, "{offset}")?;
        bin.write_all(&f.t.to_le_bytes())?;
        bin.write_all(&f.left)?;
        bin.write_all(&f.right)?;
        offset += 8 + 2 * n as u64;
    }
    bin.flush()?;
    idx.flush()?;
    Ok(())
}

trait Timed: Clone {
    fn t(&self) -> f64;
    fn is_valid(&self) -> bool;
    fn retimed(&self, t: f64, valid: bool) -> Self;
}

impl Timed for EyeSample {
    fn t(&self) -> f64 {
        self.t
    }
    fn is_valid(&self) -> bool {
        self.valid
    }
    fn retimed(&self, t: f64, valid: bool) -> Self {
        EyeSample {
            t,
            valid,
            ..self.clone()
        }
    }
}

impl Timed for HeadSample {
    fn t(&self) -> f64 {
        self.t
    }
    fn is_valid(&self) -> bool {
        self.valid
    }
    fn retimed(&self, t: f64, valid: bool) -> Self {
        HeadSample {
            t,
            valid,
            ..self.clone()
        }
    }
}

impl Timed for StereoFrame {
    fn t(&self) -> f64 {
        self.t
    }
    fn is_valid(&self) -> bool {
        true
    }
    fn retimed(&self, t: f64, _valid: bool) -> Self {
        StereoFrame { t, ..self.clone() }
    }
}

fn check_gaps<T: Timed>(stream: &'static str, samples: &[T], duration: f64) -> Result<()> {
    let mut prev = 0.0;
    for s in samples.iter().filter(|s| s.is_valid()) {
        if s.t() - prev > MAX_GAP_S + 1e-9 {
            return Err(Error::Gap {
                stream,
                start: prev,
                end: s.t(),
            });
        }
        prev = s.t();
    }
    if duration - prev > MAX_GAP_S + 1e-9 {
        return Err(Error::Gap {
            stream,
            start: prev,
            end: duration,
        });
    }
    Ok(())
}

/// Nearest sample in time to `t` (earlier one on exact ties).
fn nearest<T: Timed>(samples: &[T], t: f64) -> usize {
    let i = samples.partition_point(|s| s.t() < t);
    if i == 0 {
        0
    } else if i == samples.len() || t - samples[i - 1].t() <= samples[i].t() - t {
        i - 1
    } else {
        i
    }
}

fn resample<T: Timed>(samples: &[T], grid: &[f64]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(grid.len());
    let mut last_valid: Option<usize> = None;
    for &t in grid {
        let i = nearest(samples, t);
        let s = &samples[i];
        if s.is_valid() {
            last_valid = Some(i);
            out.push(s.retimed(t, true));
        } else {
            // hold the last valid value; before any, borrow the next one
            let src = last_valid
                .or_else(|| {
                    samples[i..]
                        .iter()
                        .position(|s| s.is_valid())
                        .map(|k| i + k)
                })
                .expect("gap check guarantees a valid sample");
            out.push(samples[src].retimed(t, false));
        }
    }
    out
}

/// Resamples every stream onto `t = k / rate_hz` by nearest neighbour in
/// time. Invalid samples take the last valid value and stay flagged.
pub fn align_streams(session: &SessionRecord, rate_hz: f64) -> Result<SessionRecord> {
    if !(rate_hz > 0.0) {
        return Err(Error::Config(format!("sampling rate {rate_hz}")));
    }
    if session.eye.is_empty() || session.head.is_empty() {
        return Err(Error::Empty(format!(
            "{}: eye or head stream is empty",
            session.key()
        )));
    }
    if session.frames_present && session.frames.is_empty() {
        return Err(Error::Empty(format!(
            "{}: frame stream is empty",
            session.key()
        )));
    }
    let duration = session.duration();
    check_gaps("eye", &session.eye, duration)?;
    check_gaps("head", &session.head, duration)?;
    if session.frames_present {
        check_gaps("frames", &session.frames, duration)?;
    }
    let count = (duration * rate_hz + 1e-6).floor() as usize + 1;
    let grid: Vec<f64> = (0..count).map(|k| k as f64 / rate_hz).collect();
    Ok(SessionRecord {
        participant: session.participant.clone(),
        simulation: session.simulation,
        eye: resample(&session.eye, &grid),
        head: resample(&session.head, &grid),
        frames: if session.frames_present {
            resample(&session.frames, &grid)
        } else {
            Vec::new()
        },
        frames_present: session.frames_present,
        reports: session.reports.clone(),
        rate_hz,
        aligned: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye_row(t: f64) -> String {
        format!("{t},3.1,3.2,0,0,1,0.6,0,0.8,750")
    }

    fn write_fixture(
        root: &Path,
        eye_rows: &[String],
        head_rows: &[String],
        fms: &str,
    ) -> std::path::PathBuf {
        let dir = root.join("p01").join("BeachCity");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("eye.csv"),
            format!("{EYE_HEADER}\n{}\n", eye_rows.join("\n")),
        )
        .unwrap();
        fs::write(
            dir.join("head.csv"),
            format!("{HEAD_HEADER}\n{}\n", head_rows.join("\n")),
        )
        .unwrap();
        fs::write(dir.join("fms.csv"), format!("{FMS_HEADER}\n{fms}")).unwrap();
        dir
    }

    fn head_rows(times: &[f64]) -> Vec<String> {
        times.iter().map(|t| format!("{t},0,0,0,1")).collect()
    }

    #[test]
    fn parses_three_row_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        let times = [0.0, 0.05, 0.1];
        let dir = write_fixture(
            tmp.path(),
            &times.map(eye_row),
            &head_rows(&times),
            "0.1,2\n",
        );
        let s = parse_session(&dir).unwrap();
        assert_eq!(s.eye.len(), 3);
        assert!(s.eye.iter().all(|e| e.valid));
        assert_eq!(s.participant, "p01");
        assert_eq!(s.simulation, Simulation::BeachCity);
        assert!(!s.frames_present);
        assert_eq!(s.reports, vec![FmsReport { t: 0.1, score: 2.0 }]);
        assert_eq!(
            s.eye[1].features(),
            [3.1, 3.2, 0.0, 0.0, 1.0, 0.6, 0.0, 0.8, 750.0]
        );
    }

    #[test]
    fn zero_gaze_is_flagged_not_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        let rows = vec![eye_row(0.0), "0.05,3.1,3.2,0,0,0,0.6,0,0.8,750".to_string()];
        let dir = write_fixture(tmp.path(), &rows, &head_rows(&[0.0, 0.05]), "");
        let s = parse_session(&dir).unwrap();
        assert!(s.eye[0].valid);
        assert!(!s.eye[1].valid);
    }

    #[test]
    fn parse_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_fixture(tmp.path(), &[eye_row(0.0)], &head_rows(&[0.0]), "30,11\n");
        assert!(matches!(
            parse_session(&dir),
            Err(Error::Parse { line: 2, .. })
        ));

        let dir = write_fixture(
            tmp.path(),
            &[eye_row(0.0), "0.05,3,3,0,0,1".into()],
            &head_rows(&[0.0]),
            "",
        );
        assert!(matches!(
            parse_session(&dir),
            Err(Error::Parse { line: 3, .. })
        ));

        let dir = write_fixture(
            tmp.path(),
            &[eye_row(0.1), eye_row(0.05)],
            &head_rows(&[0.0]),
            "",
        );
        assert!(matches!(
            parse_session(&dir),
            Err(Error::Order { line: 3, .. })
        ));

        let dir = write_fixture(tmp.path(), &[eye_row(0.0)], &head_rows(&[0.0]), "");
        fs::remove_file(dir.join("head.csv")).unwrap();
        assert!(matches!(parse_session(&dir), Err(Error::MissingStream(_))));
    }

    #[test]
    fn frames_need_both_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_fixture(tmp.path(), &[eye_row(0.0)], &head_rows(&[0.0]), "");
        fs::write(dir.join("frames.bin"), FRAMES_MAGIC).unwrap();
        assert!(matches!(parse_session(&dir), Err(Error::MissingStream(_))));
    }

    #[test]
    fn frame_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_fixture(
            tmp.path(),
            &[eye_row(0.0), eye_row(0.05)],
            &head_rows(&[0.0, 0.05]),
            "",
        );
        let n = frame_bytes(FRAME_SIZE);
        let frames: Vec<StereoFrame> = (0..2)
            .map(|k| StereoFrame {
                t: k as f64 * 0.05,
                size: FRAME_SIZE,
                left: (0..n).map(|i| (i * 7 + k) as u8).collect(),
                right: (0..n).map(|i| (i * 3 + k) as u8).collect(),
            })
            .collect();
        write_frames(&dir, &frames).unwrap();
        let s = parse_session(&dir).unwrap();
        assert!(s.frames_present);
        assert_eq!(s.frames, frames);
        let idx = fs::read_to_string(dir.join("frames.idx")).unwrap();
        assert_eq!(idx, format!("4\n{}\n", 4 + 8 + 2 * n));
    }

    fn grid_session(times: &[f64]) -> SessionRecord {
        SessionRecord {
            participant: "p".into(),
            simulation: Simulation::SeaVoyage,
            eye: times
                .iter()
                .map(|&t| EyeSample::from_features(t, &[3.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, t]))
                .collect(),
            head: times
                .iter()
                .map(|&t| HeadSample::new(t, [0.0, 0.0, 0.0, 1.0]))
                .collect(),
            frames: Vec::new(),
            frames_present: false,
            reports: Vec::new(),
            rate_hz: 20.0,
            aligned: false,
        }
    }

    #[test]
    fn aligned_input_is_unchanged() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 / 20.0).collect();
        let s = grid_session(&times);
        let a = align_streams(&s, 20.0).unwrap();
        assert_eq!(a.eye, s.eye);
        assert_eq!(a.head, s.head);
        assert_eq!(a.eye.len(), 5 * 20 + 1);
    }

    #[test]
    fn jittered_samples_snap_to_nearest_grid_point() {
        let jitter = |k: usize| if k % 2 == 0 { 0.01 } else { -0.01 };
        let times: Vec<f64> = (0..=40)
            .map(|k| (k as f64 / 20.0 + jitter(k)).max(0.0))
            .collect();
        let s = grid_session(&times);
        let a = align_streams(&s, 20.0).unwrap();
        for (k, e) in a.eye.iter().enumerate() {
            let grid = k as f64 / 20.0;
            // oracle: brute-force closest raw sample
            let best = times
                .iter()
                .enumerate()
                .min_by(|x, y| (x.1 - grid).abs().partial_cmp(&(y.1 - grid).abs()).unwrap())
                .unwrap()
                .0;
            assert_eq!(e.t, grid);
            assert_eq!(e.convergence_mm, times[best]);
        }
    }

    #[test]
    fn one_second_hole_is_a_gap() {
        let times: Vec<f64> = (0..=100)
            .map(|k| k as f64 / 20.0)
            .filter(|t| !(*t > 2.0 && *t < 3.0))
            .collect();
        let mut s = grid_session(&times);
        s.head = grid_session(&(0..=100).map(|k| k as f64 / 20.0).collect::<Vec<_>>()).head;
        match align_streams(&s, 20.0) {
            Err(Error::Gap { stream, start, end }) => {
                assert_eq!(stream, "eye");
                assert_eq!((start, end), (2.0, 3.0));
            }
            other => panic!("expected gap, got {other:?}"),
        }
    }

    #[test]
    fn invalid_samples_hold_last_valid_and_are_counted() {
        let times: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let mut s = grid_session(&times);
        s.eye[5].left_gaze = [0.0; 3];
        s.eye[5].valid = false;
        s.eye[6].valid = false;
        s.eye[0].valid = false;
        let a = align_streams(&s, 20.0).unwrap();
        assert_eq!(a.invalid_eye(), 3);
        assert_eq!(a.eye[5].convergence_mm, s.eye[4].convergence_mm);
        assert_eq!(a.eye[6].left_gaze, s.eye[4].left_gaze);
        assert_eq!(a.eye[0].convergence_mm, s.eye[1].convergence_mm);
        assert_eq!(align_streams(&a, 20.0).unwrap(), a);
    }
}
