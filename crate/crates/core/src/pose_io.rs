//! Raw pose data model, on-disk formats and keypoint-layout conversion.
//!
//! Sequence files hold one JSON object per line:
//!
//! ```text
//! {"seq_id":"001-nm-01-090","subject":"001","condition":"NM","view":"090","frames":[[[x,y,c],...],...]}
//! ```
//!
//! Every frame carries exactly 17 `[x, y, confidence]` triples in COCO order.
//! Image coordinates are used throughout: x grows rightward, y downward.
//!
//! Manifests list one sequence file per line as `path<TAB>role`, where role
//! is `train`, `gallery` or `probe`. Relative paths resolve against the
//! manifest's directory. An optional `#protocol<TAB>name` line selects the
//! evaluation protocol; other lines starting with `#` are comments.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of keypoints in the COCO2017 layout.
pub const NUM_JOINTS: usize = 17;

pub mod coco {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;

    /// Left/right counterpart of every joint; the nose maps to itself.
    pub const MIRROR: [usize; super::NUM_JOINTS] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15];
}

/// Index of the explicit neck in the 18-keypoint (OpenPose-style) layout.
pub const NECK_18: usize = 1;

/// For every COCO17 index, the source index in the 18-keypoint layout
/// (nose, neck, R-shoulder, R-elbow, R-wrist, L-shoulder, L-elbow, L-wrist,
/// R-hip, R-knee, R-ankle, L-hip, L-knee, L-ankle, R-eye, L-eye, R-ear, L-ear).
pub const COCO17_FROM_18: [usize; NUM_JOINTS] = [0, 15, 14, 17, 16, 5, 2, 6, 3, 7, 4, 11, 8, 12, 9, 13, 10];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.confidence.is_finite()
    }
}

/// One frame of 17 COCO-ordered keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub keypoints: [Keypoint; NUM_JOINTS],
}

impl PoseFrame {
    pub fn from_slice(keypoints: &[Keypoint]) -> Result<Self> {
        let keypoints: [Keypoint; NUM_JOINTS] = keypoints.try_into().map_err(|_| Error::KeypointCount {
            expected: NUM_JOINTS,
            actual: keypoints.len(),
        })?;
        Ok(Self { keypoints })
    }

    /// Frame from bare coordinates with confidence 1.
    pub fn from_coords(coords: &[[f64; 2]; NUM_JOINTS]) -> Self {
        let mut keypoints = [Keypoint::default(); NUM_JOINTS];
        for (kp, c) in keypoints.iter_mut().zip(coords) {
            *kp = Keypoint::new(c[0], c[1], 1.0);
        }
        Self { keypoints }
    }

    pub fn coords(&self) -> [[f64; 2]; NUM_JOINTS] {
        let mut out = [[0.0; 2]; NUM_JOINTS];
        for (o, kp) in out.iter_mut().zip(&self.keypoints) {
            *o = [kp.x, kp.y];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    NM,
    BG,
    CL,
    WILD,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
            Condition::WILD => "WILD",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub seq_id: String,
    pub subject: String,
    pub condition: Condition,
    pub view: String,
    pub frames: Vec<PoseFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    seq_id: String,
    subject: String,
    condition: Condition,
    view: String,
    frames: Vec<Vec<[f64; 3]>>,
}

impl PoseSequence {
    /// Encode as a single-line record (no trailing newline).
    pub fn to_record(&self) -> String {
        let record = SequenceRecord {
            seq_id: self.seq_id.clone(),
            subject: self.subject.clone(),
            condition: self.condition,
            view: self.view.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| f.keypoints.iter().map(|k| [k.x, k.y, k.confidence]).collect())
                .collect(),
        };
        serde_json::to_string(&record).expect("sequence records always serialize")
    }

    /// Decode one record; `Err` carries a message without location.
    pub fn from_record(line: &str) -> std::result::Result<Self, String> {
        let record: SequenceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if record.frames.is_empty() {
            return Err("sequence has no frames".into());
        }
        let mut frames = Vec::with_capacity(record.frames.len());
        for (t, raw) in record.frames.iter().enumerate() {
            if raw.len() != NUM_JOINTS {
                return Err(format!("frame {t} has {} keypoints, expected {NUM_JOINTS}", raw.len()));
            }
            let mut keypoints = [Keypoint::default(); NUM_JOINTS];
            for (j, (kp, v)) in keypoints.iter_mut().zip(raw).enumerate() {
                if !(0.0..=1.0).contains(&v[2]) {
                    return Err(format!("frame {t} keypoint {j}: confidence {} outside [0, 1]", v[2]));
                }
                *kp = Keypoint::new(v[0], v[1], v[2]);
            }
            frames.push(PoseFrame { keypoints });
        }
        Ok(Self {
            seq_id: record.seq_id,
            subject: record.subject,
            condition: record.condition,
            view: record.view,
            frames,
        })
    }
}

/// Read every record of a sequence file.
pub fn read_sequence_file(path: &Path) -> Result<Vec<PoseSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = PoseSequence::from_record(line).map_err(|message| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequence_file(path: &Path, sequences: &[PoseSequence]) -> Result<()> {
    let mut buf = String::new();
    for s in sequences {
        buf.push_str(&s.to_record());
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Write through a sibling temporary file so readers never see partial output.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Gallery,
    Probe,
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "gallery" => Ok(Role::Gallery),
            "probe" => Ok(Role::Probe),
            other => Err(Error::Invalid(format!("unknown role {other:?}"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Gallery => "gallery",
            Role::Probe => "probe",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Casiab,
    Oumvlp,
    Gait3d,
    Grew,
    #[default]
    Simple,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casiab" => Ok(Protocol::Casiab),
            "oumvlp" => Ok(Protocol::Oumvlp),
            "gait3d" => Ok(Protocol::Gait3d),
            "grew" => Ok(Protocol::Grew),
            "simple" => Ok(Protocol::Simple),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Casiab => "casiab",
            Protocol::Oumvlp => "oumvlp",
            Protocol::Gait3d => "gait3d",
            Protocol::Grew => "grew",
            Protocol::Simple => "simple",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub protocol: Protocol,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|(line, message)| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    fn parse(text: &str, base: &Path) -> std::result::Result<Self, (usize, String)> {
        let mut manifest = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#protocol\t") {
                manifest.protocol = rest.trim().parse().map_err(|e: Error| (i + 1, e.to_string()))?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (p, role) = line
                .split_once('\t')
                .ok_or_else(|| (i + 1, "expected path<TAB>role".to_string()))?;
            let role = role.trim().parse().map_err(|e: Error| (i + 1, e.to_string()))?;
            let p = Path::new(p);
            let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            manifest.entries.push(ManifestEntry { path, role });
        }
        Ok(manifest)
    }

    /// Serialize with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = format!("#protocol\t{}\n", self.protocol);
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&format!("{}\t{}\n", p.display(), e.role));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        write_atomic(path, self.to_text(base).as_bytes())
    }
}

/// A loaded sequence together with the role its manifest entry assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub sequence: PoseSequence,
    pub role: Role,
}

/// Load every sequence referenced by a manifest, in manifest order.
pub fn load_sequences(manifest: &DatasetManifest) -> Result<Vec<LabeledSequence>> {
    let mut out = Vec::new();
    for entry in &manifest.entries {
        for sequence in read_sequence_file(&entry.path)? {
            out.push(LabeledSequence {
                sequence,
                role: entry.role,
            });
        }
    }
    Ok(out)
}

/// Drop the explicit neck of an 18-keypoint frame and reorder to COCO17.
pub fn convert_alphapose18_to_coco17(frame18: &[Keypoint]) -> Result<PoseFrame> {
    if frame18.len() != 18 {
        return Err(Error::KeypointCount {
            expected: 18,
            actual: frame18.len(),
        });
    }
    let mut keypoints = [Keypoint::default(); NUM_JOINTS];
    for (kp, &src) in keypoints.iter_mut().zip(&COCO17_FROM_18) {
        *kp = frame18[src];
    }
    Ok(PoseFrame { keypoints })
}

/// Thresholds for [`validate_sequence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRules {
    pub min_frames: usize,
    /// Frames whose vertical extent falls below this are flagged.
    pub min_extent: f64,
    /// Frames whose mean confidence falls below this are flagged; `None` disables.
    pub min_mean_confidence: Option<f64>,
}

impl Default for ValidationRules {
    fn default() -> Self {
        Self {
            min_frames: 1,
            min_extent: 225.0 * 1e-6,
            min_mean_confidence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub seq_id: String,
    /// `(frames, required)` when the sequence is too short.
    pub too_short: Option<(usize, usize)>,
    pub non_finite_frames: Vec<usize>,
    pub degenerate_frames: Vec<usize>,
    pub low_confidence_frames: Vec<usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.too_short.is_none()
            && self.non_finite_frames.is_empty()
            && self.degenerate_frames.is_empty()
            && self.low_confidence_frames.is_empty()
    }
}

pub fn validate_sequence(seq: &PoseSequence, rules: &ValidationRules) -> ValidationReport {
    let mut report = ValidationReport {
        seq_id: seq.seq_id.clone(),
        ..Default::default()
    };
    if seq.frames.len() < rules.min_frames {
        report.too_short = Some((seq.frames.len(), rules.min_frames));
    }
    for (t, frame) in seq.frames.iter().enumerate() {
        if !frame.keypoints.iter().all(Keypoint::is_finite) {
            report.non_finite_frames.push(t);
            continue;
        }
        let (lo, hi) = frame
            .keypoints
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
                (lo.min(k.y), hi.max(k.y))
            });
        if hi - lo < rules.min_extent {
            report.degenerate_frames.push(t);
        }
        if let Some(min_conf) = rules.min_mean_confidence {
            let mean = frame.keypoints.iter().map(|k| k.confidence).sum::<f64>() / NUM_JOINTS as f64;
            if mean < min_conf {
                report.low_confidence_frames.push(t);
            }
        }
    }
    report
}
