//! Synthetic walkers with identity-specific proportions and gait, seen
//! through similarity-transform cameras.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hot::Coords;
use crate::pose_io::{
    coco, write_sequence_file, Condition, DatasetManifest, ManifestEntry, PoseFrame, PoseSequence, Protocol, Role,
    NUM_JOINTS,
};

/// Number of limb-length ratios per identity.
pub const NUM_RATIOS: usize = 8;
/// Minimum relative difference, in at least one ratio, between identities.
pub const MIN_RATIO_SPACING: f64 = 0.05;

/// Base lengths of head height, shoulder half-width, hip half-width, torso,
/// upper arm, forearm, thigh and shank.
const BASE_LENGTHS: [f64; NUM_RATIOS] = [22.0, 17.0, 11.0, 55.0, 30.0, 26.0, 45.0, 42.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitIdentitySpec {
    pub id: usize,
    /// Multipliers of the base limb lengths.
    pub ratios: [f64; NUM_RATIOS],
    /// Frames per stride.
    pub period: f64,
    /// Hip swing amplitude in radians.
    pub stride_amplitude: f64,
    /// Shoulder swing amplitude in radians.
    pub arm_amplitude: f64,
    /// Peak knee flexion in radians.
    pub knee_amplitude: f64,
    /// Phase lag of the arms relative to the opposite leg.
    pub arm_phase: f64,
}

impl GaitIdentitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0)) || !(self.period >= 4.0) {
            return Err(Error::Invalid(format!(
                "identity {}: ratios must be positive and period at least 4",
                self.id
            )));
        }
        Ok(())
    }

    /// Largest relative ratio difference to `other`.
    pub fn ratio_spacing(&self, other: &Self) -> f64 {
        self.ratios
            .iter()
            .zip(&other.ratios)
            .map(|(a, b)| (a - b).abs() / a.min(*b))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub scale: f64,
    pub translation: [f64; 2],
    /// In-plane rotation about the neck, radians.
    pub rotation: f64,
    /// Per-keypoint Gaussian jitter in output pixels.
    pub jitter: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
            rotation: 0.0,
            jitter: 0.0,
        }
    }
}

impl CameraSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Invalid(
                "camera: scale must be positive, jitter non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let [x, y] = p;
        [
            self.scale * (c * x - s * y) + self.translation[0],
            self.scale * (s * x + c * y) + self.translation[1],
        ]
    }
}

/// `n` identities drawn from `seed` with pairwise ratio spacing of at least
/// [`MIN_RATIO_SPACING`].
pub fn identity_specs(n: usize, seed: u64) -> Vec<GaitIdentitySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<GaitIdentitySpec> = Vec::with_capacity(n);
    while out.len() < n {
        let spec = GaitIdentitySpec {
            id: out.len(),
            ratios: std::array::from_fn(|_| rng.random_range(0.75..1.25)),
            period: rng.random_range(20.0..34.0),
            stride_amplitude: rng.random_range(0.25..0.5),
            arm_amplitude: rng.random_range(0.15..0.6),
            knee_amplitude: rng.random_range(0.3..0.9),
            arm_phase: rng.random_range(-0.5..0.5),
        };
        if out.iter().all(|o| o.ratio_spacing(&spec) >= MIN_RATIO_SPACING) {
            out.push(spec);
        }
    }
    out
}

/// Upright walker at time `t` (frames) with phase offset `phase` and
/// amplitude factor `amp`. Neck at the origin, y pointing down.
pub fn walker_pose(id: &GaitIdentitySpec, t: f64, phase: f64, amp: f64) -> Coords {
    let l: [f64; NUM_RATIOS] = std::array::from_fn(|i| BASE_LENGTHS[i] * id.ratios[i]);
    let [head, shoulder_w, hip_w, torso, upper_arm, forearm, thigh, shank] = l;
    let w = 2.0 * PI * t / id.period + phase;
    let mut p = [[0.0; 2]; NUM_JOINTS];

    p[coco::NOSE] = [0.0, -head];
    p[coco::LEFT_EYE] = [0.2 * head, -1.2 * head];
    p[coco::RIGHT_EYE] = [-0.2 * head, -1.2 * head];
    p[coco::LEFT_EAR] = [0.4 * head, -1.05 * head];
    p[coco::RIGHT_EAR] = [-0.4 * head, -1.05 * head];
    p[coco::LEFT_SHOULDER] = [shoulder_w, 0.0];
    p[coco::RIGHT_SHOULDER] = [-shoulder_w, 0.0];
    p[coco::LEFT_HIP] = [hip_w, torso];
    p[coco::RIGHT_HIP] = [-hip_w, torso];

    let limb = |from: [f64; 2], len: f64, angle: f64| [from[0] + len * angle.sin(), from[1] + len * angle.cos()];
    for (side, offset) in [(0usize, 0.0), (1usize, PI)] {
        let (hip, knee, ankle, sh, elbow, wrist) = if side == 0 {
            (
                coco::LEFT_HIP,
                coco::LEFT_KNEE,
                coco::LEFT_ANKLE,
                coco::LEFT_SHOULDER,
                coco::LEFT_ELBOW,
                coco::LEFT_WRIST,
            )
        } else {
            (
                coco::RIGHT_HIP,
                coco::RIGHT_KNEE,
                coco::RIGHT_ANKLE,
                coco::RIGHT_SHOULDER,
                coco::RIGHT_ELBOW,
                coco::RIGHT_WRIST,
            )
        };
        let a = amp * id.stride_amplitude * (w + offset).sin();
        let flex = amp * id.knee_amplitude * 0.5 * (1.0 + (w + offset + PI / 2.0).sin());
        p[knee] = limb(p[hip], thigh, a);
        p[ankle] = limb(p[knee], shank, a - flex);
        let arm = -amp * id.arm_amplitude * (w + offset + id.arm_phase).sin();
        p[elbow] = limb(p[sh], upper_arm, arm);
        p[wrist] = limb(p[elbow], forearm, arm + 0.3 * amp * id.arm_amplitude);
    }
    p
}

/// Sequence of `frames` poses seen through `camera`. The seed fixes the start
/// phase, a small amplitude perturbation and the jitter.
pub fn generate_sequence(
    identity: &GaitIdentitySpec,
    camera: &CameraSpec,
    frames: usize,
    seed: u64,
) -> Result<PoseSequence> {
    identity.validate()?;
    camera.validate()?;
    let mut motion = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    let phase = motion.random_range(0.0..2.0 * PI);
    let amp = motion.random_range(0.97..1.03);
    let jitter = Normal::new(0.0, camera.jitter).expect("finite jitter");
    let frames = (0..frames)
        .map(|t| {
            let pose = walker_pose(identity, t as f64, phase, amp);
            let coords: Coords = std::array::from_fn(|j| {
                let [x, y] = camera.apply(pose[j]);
                if camera.jitter > 0.0 {
                    [x + jitter.sample(&mut noise), y + jitter.sample(&mut noise)]
                } else {
                    [x, y]
                }
            });
            PoseFrame::from_coords(&coords)
        })
        .collect();
    Ok(PoseSequence {
        seq_id: format!("id{:03}-seed{seed}", identity.id),
        subject: format!("id{:03}", identity.id),
        condition: Condition::NM,
        view: "000".into(),
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub sequences_per_identity: usize,
    pub frames: usize,
    pub seed: u64,
    /// Sequence `j` of every identity uses camera `j % cameras.len()`.
    pub cameras: Vec<CameraSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            sequences_per_identity: 6,
            frames: 60,
            seed: 0,
            cameras: vec![CameraSpec {
                translation: [320.0, 120.0],
                jitter: 0.5,
                ..CameraSpec::default()
            }],
        }
    }
}

fn sequence_seed(seed: u64, identity: usize, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((identity as u64) << 20)
        .wrapping_add(index as u64)
}

/// All sequences of a synthetic dataset with their roles: the first sequence
/// of every identity is a probe, the rest are gallery.
pub fn generate_sequences(cfg: &SynthConfig) -> Result<Vec<(PoseSequence, Role)>> {
    if cfg.identities < 2 || cfg.sequences_per_identity < 2 || cfg.frames == 0 || cfg.cameras.is_empty() {
        return Err(Error::Invalid(
            "synth: need at least 2 identities, 2 sequences each, frames > 0 and a camera".into(),
        ));
    }
    let specs = identity_specs(cfg.identities, cfg.seed);
    let mut out = Vec::with_capacity(cfg.identities * cfg.sequences_per_identity);
    for spec in &specs {
        for j in 0..cfg.sequences_per_identity {
            let cam = &cfg.cameras[j % cfg.cameras.len()];
            let mut seq = generate_sequence(spec, cam, cfg.frames, sequence_seed(cfg.seed, spec.id, j))?;
            seq.seq_id = format!("{}-NM-{:02}-000", seq.subject, j + 1);
            let role = if j == 0 { Role::Probe } else { Role::Gallery };
            out.push((seq, role));
        }
    }
    Ok(out)
}

/// Write one file per sequence plus `manifest.tsv` into `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        protocol: Protocol::Simple,
    };
    for (seq, role) in generate_sequences(cfg)? {
        let path = dir.join(format!("{}.jsonl", seq.seq_id));
        write_sequence_file(&path, std::slice::from_ref(&seq))?;
        manifest.entries.push(ManifestEntry { path, role });
    }
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
