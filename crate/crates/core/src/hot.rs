//! Human-oriented transformation: de-slant, per-frame height rescale and
//! neck-origin alignment.
//!
//! The output of [`apply_hot`] is invariant to any similarity transform of
//! the input camera frame (scale, translation and, above the slant
//! threshold, rotation about the neck).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_io::{coco, Condition, PoseFrame, PoseSequence, NUM_JOINTS};

/// 17 two-dimensional joint positions.
pub type Coords = [[f64; 2]; NUM_JOINTS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotConfig {
    /// Target vertical extent of every normalized frame.
    pub h_unif: f64,
    /// Slant threshold in radians; frames with |theta| below it are not rotated.
    pub phi: f64,
    /// Frames with a smaller vertical extent are dropped.
    pub epsilon_extent: f64,
}

impl Default for HotConfig {
    fn default() -> Self {
        Self {
            h_unif: 225.0,
            phi: 0.1,
            epsilon_extent: 225.0 * 1e-6,
        }
    }
}

impl HotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_unif > 0.0) || !(self.phi >= 0.0) || !(self.epsilon_extent > 0.0) {
            return Err(Error::Config(format!(
                "hot: need h_unif > 0, phi >= 0, epsilon_extent > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualJoints {
    pub neck: [f64; 2],
    pub hip: [f64; 2],
}

/// A pose sequence in the unified, camera-independent coordinate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedPoseSequence {
    pub seq_id: String,
    pub subject: String,
    pub condition: Condition,
    pub view: String,
    pub frames: Vec<Coords>,
    /// Source frame index of every surviving frame.
    pub kept_frame_indices: Vec<usize>,
}

impl UnifiedPoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Single-line record carrying a `"unified": true` marker.
    pub fn to_record(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            unified: bool,
            #[serde(flatten)]
            sequence: &'a UnifiedPoseSequence,
        }
        serde_json::to_string(&Out {
            unified: true,
            sequence: self,
        })
        .expect("unified records always serialize")
    }

    pub fn from_record(line: &str) -> std::result::Result<Self, String> {
        let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let marker = value.as_object_mut().and_then(|o| o.remove("unified"));
        if marker != Some(serde_json::Value::Bool(true)) {
            return Err("record is not marked unified".into());
        }
        let seq: Self = serde_json::from_value(value).map_err(|e| e.to_string())?;
        if seq.frames.len() != seq.kept_frame_indices.len() {
            return Err("frames and kept_frame_indices differ in length".into());
        }
        Ok(seq)
    }
}

pub fn compute_virtual_joints(frame: &PoseFrame) -> Result<VirtualJoints> {
    let k = &frame.keypoints;
    let pick = [
        coco::LEFT_SHOULDER,
        coco::RIGHT_SHOULDER,
        coco::LEFT_HIP,
        coco::RIGHT_HIP,
    ];
    if pick.iter().any(|&i| !(k[i].x.is_finite() && k[i].y.is_finite())) {
        return Err(Error::NonFinite("shoulder or hip keypoint".into()));
    }
    Ok(virtual_joints_of(&frame.coords()))
}

fn virtual_joints_of(c: &Coords) -> VirtualJoints {
    VirtualJoints {
        neck: midpoint(c[coco::LEFT_SHOULDER], c[coco::RIGHT_SHOULDER]),
        hip: midpoint(c[coco::LEFT_HIP], c[coco::RIGHT_HIP]),
    }
}

fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Single-argument arctangent of `dx / dy`, valued in (-pi/2, pi/2].
///
/// Returns `None` when `dy == 0` and `dx != 0`; both zero gives `Some(0)`.
pub(crate) fn slope_angle(dx: f64, dy: f64) -> Option<f64> {
    if dx == 0.0 {
        Some(0.0)
    } else if dy == 0.0 {
        None
    } else {
        Some((dx / dy).atan())
    }
}

/// Spine slant measured against the vertical image axis.
pub fn compute_rotation_angle(vj: &VirtualJoints) -> Result<f64> {
    let dx = vj.neck[0] - vj.hip[0];
    let dy = vj.neck[1] - vj.hip[1];
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateSpine("neck and hip coincide"));
    }
    slope_angle(dx, dy).ok_or(Error::DegenerateSpine("horizontal spine"))
}

/// Rotate about the neck by `theta` when `|theta| >= phi`, else pass through.
pub fn affine_transform(coords: &Coords, vj: &VirtualJoints, theta: f64, phi: f64) -> Coords {
    if theta.abs() < phi {
        return *coords;
    }
    let (s, c) = theta.sin_cos();
    let [nx, ny] = vj.neck;
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(coords) {
        *o = [
            c * p[0] - s * p[1] + (1.0 - c) * nx + s * ny,
            s * p[0] + c * p[1] - s * nx + (1.0 - c) * ny,
        ];
    }
    out
}

pub fn vertical_extent(coords: &Coords) -> f64 {
    let (lo, hi) = coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p[1]), hi.max(p[1]))
    });
    hi - lo
}

pub fn body_rescale(coords: &Coords, h_unif: f64, epsilon_extent: f64) -> Result<Coords> {
    let extent = vertical_extent(coords);
    if !(extent >= epsilon_extent) {
        return Err(Error::DegenerateFrame {
            extent,
            minimum: epsilon_extent,
        });
    }
    let scale = h_unif / extent;
    let mut out = *coords;
    for p in out.iter_mut() {
        p[0] *= scale;
        p[1] *= scale;
    }
    Ok(out)
}

/// Translate so the virtual neck sits at the origin.
///
/// The shoulders are written as exact opposites, so the recomputed neck of
/// the output is exactly zero in floating point.
pub fn body_align(coords: &Coords, neck: [f64; 2]) -> Coords {
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(coords) {
        *o = [p[0] - neck[0], p[1] - neck[1]];
    }
    let l = coords[coco::LEFT_SHOULDER];
    let r = coords[coco::RIGHT_SHOULDER];
    let half = [(l[0] - r[0]) / 2.0, (l[1] - r[1]) / 2.0];
    out[coco::LEFT_SHOULDER] = half;
    out[coco::RIGHT_SHOULDER] = [-half[0], -half[1]];
    out
}

/// Normalize one frame; `Err` means the frame must be dropped.
pub fn hot_frame(frame: &PoseFrame, cfg: &HotConfig) -> Result<Coords> {
    let vj = compute_virtual_joints(frame)?;
    if frame.keypoints.iter().any(|k| !(k.x.is_finite() && k.y.is_finite())) {
        return Err(Error::NonFinite("keypoint coordinate".into()));
    }
    let theta = if vj.neck == vj.hip {
        0.0
    } else {
        compute_rotation_angle(&vj)?
    };
    let slanted = affine_transform(&frame.coords(), &vj, theta, cfg.phi);
    let rescaled = body_rescale(&slanted, cfg.h_unif, cfg.epsilon_extent)?;
    let neck = virtual_joints_of(&rescaled).neck;
    Ok(body_align(&rescaled, neck))
}

pub fn apply_hot(seq: &PoseSequence, cfg: &HotConfig) -> Result<UnifiedPoseSequence> {
    let mut frames = Vec::with_capacity(seq.frames.len());
    let mut kept = Vec::with_capacity(seq.frames.len());
    for (t, frame) in seq.frames.iter().enumerate() {
        match hot_frame(frame, cfg) {
            Ok(c) => {
                frames.push(c);
                kept.push(t);
            }
            Err(e) => log::debug!("{}: dropping frame {t}: {e}", seq.seq_id),
        }
    }
    if frames.is_empty() {
        return Err(Error::EmptySequence(seq.seq_id.clone()));
    }
    Ok(UnifiedPoseSequence {
        seq_id: seq.seq_id.clone(),
        subject: seq.subject.clone(),
        condition: seq.condition,
        view: seq.view.clone(),
        frames,
        kept_frame_indices: kept,
    })
}

/// Pose normalization applied before descriptor generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Hot,
    /// Raw camera coordinates, frames with non-finite values dropped.
    None,
    SpineUnit,
    DatasetIndependent,
}

/// Apply the configured normalization.
pub fn normalize_sequence(seq: &PoseSequence, method: Normalization, cfg: &HotConfig) -> Result<UnifiedPoseSequence> {
    match method {
        Normalization::Hot => apply_hot(seq, cfg),
        Normalization::None => {
            let (kept, frames): (Vec<usize>, Vec<Coords>) = seq
                .frames
                .iter()
                .enumerate()
                .filter(|(_, f)| f.keypoints.iter().all(|k| k.x.is_finite() && k.y.is_finite()))
                .map(|(t, f)| (t, f.coords()))
                .unzip();
            if frames.is_empty() {
                return Err(Error::EmptySequence(seq.seq_id.clone()));
            }
            Ok(UnifiedPoseSequence {
                seq_id: seq.seq_id.clone(),
                subject: seq.subject.clone(),
                condition: seq.condition,
                view: seq.view.clone(),
                frames,
                kept_frame_indices: kept,
            })
        }
        Normalization::SpineUnit => Err(Error::NotImplemented("spine_unit normalization")),
        Normalization::DatasetIndependent => Err(Error::NotImplemented("dataset_independent normalization")),
    }
}
