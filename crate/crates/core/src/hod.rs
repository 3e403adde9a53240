//! Human-oriented descriptors: bone vectors and inner/peripheral joint angles.

use crate::graph::PARENT;
use crate::hot::{slope_angle, Coords, UnifiedPoseSequence};
use crate::pose_io::NUM_JOINTS;
use crate::tensor::Tensor;

/// How the angle of a joint is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleRole {
    /// Angle at the joint inside the triangle `(left, joint, right)`.
    Inner { left: usize, right: usize },
    /// Slant of the segment from `adj` to the joint against the vertical axis.
    Peripheral { adj: usize },
}

/// Default role of every COCO17 joint.
pub fn default_angle_roles() -> [AngleRole; NUM_JOINTS] {
    let inner = |left, right| AngleRole::Inner { left, right };
    std::array::from_fn(|j| match j {
        5 => inner(7, 11),
        6 => inner(8, 12),
        7 => inner(5, 9),
        8 => inner(6, 10),
        11 => inner(5, 13),
        12 => inner(6, 14),
        13 => inner(11, 15),
        14 => inner(12, 16),
        _ => AngleRole::Peripheral { adj: PARENT[j] },
    })
}

/// `b_i = j_i - j_parent(i)`; the root's bone is zero.
pub fn compute_bones(frame: &Coords, parent: &[usize; NUM_JOINTS]) -> Coords {
    std::array::from_fn(|i| {
        let p = parent[i];
        [frame[i][0] - frame[p][0], frame[i][1] - frame[p][1]]
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-joint angles. Returns the angles and the joints whose triangle had a
/// zero-length side (their angle is set to 0).
pub fn compute_angles(frame: &Coords, roles: &[AngleRole; NUM_JOINTS]) -> ([f64; NUM_JOINTS], Vec<usize>) {
    let mut out = [0.0; NUM_JOINTS];
    let mut degenerate = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        out[i] = match *role {
            AngleRole::Inner { left, right } => {
                let sl = dist(frame[left], frame[i]);
                let sr = dist(frame[right], frame[i]);
                let so = dist(frame[left], frame[right]);
                if sl == 0.0 || sr == 0.0 {
                    degenerate.push(i);
                    0.0
                } else {
                    ((sl * sl + sr * sr - so * so) / (2.0 * sl * sr))
                        .clamp(-1.0, 1.0)
                        .acos()
                }
            }
            AngleRole::Peripheral { adj } => {
                let dx = frame[i][0] - frame[adj][0];
                let dy = frame[i][1] - frame[adj][1];
                slope_angle(dx, dy).unwrap_or(std::f64::consts::FRAC_PI_2)
            }
        };
    }
    (out, degenerate)
}

/// Joint, bone and angle tensors of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    /// `[T, 17, 2]`
    pub joint: Tensor,
    /// `[T, 17, 2]`
    pub bone: Tensor,
    /// `[T, 17, 1]`
    pub angle: Tensor,
}

impl DescriptorSet {
    pub fn frames(&self) -> usize {
        self.joint.shape()[0]
    }
}

pub fn build_descriptors(useq: &UnifiedPoseSequence) -> DescriptorSet {
    descriptors_from_frames(&useq.frames, &useq.seq_id)
}

pub fn descriptors_from_frames(frames: &[Coords], seq_id: &str) -> DescriptorSet {
    let roles = default_angle_roles();
    let t = frames.len();
    let mut joint = Vec::with_capacity(t * NUM_JOINTS * 2);
    let mut bone = Vec::with_capacity(t * NUM_JOINTS * 2);
    let mut angle = Vec::with_capacity(t * NUM_JOINTS);
    for (f, frame) in frames.iter().enumerate() {
        joint.extend(frame.iter().flatten());
        bone.extend(compute_bones(frame, &PARENT).iter().flatten());
        let (a, degenerate) = compute_angles(frame, &roles);
        if !degenerate.is_empty() {
            log::warn!("{seq_id}: frame {f}: zero-length side at joints {degenerate:?}");
        }
        angle.extend(a);
    }
    DescriptorSet {
        joint: Tensor::from_vec(&[t, NUM_JOINTS, 2], joint).expect("joint shape"),
        bone: Tensor::from_vec(&[t, NUM_JOINTS, 2], bone).expect("bone shape"),
        angle: Tensor::from_vec(&[t, NUM_JOINTS, 1], angle).expect("angle shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::coco::MIRROR;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn random_frame(rng: &mut impl Rng) -> Coords {
        std::array::from_fn(|_| [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)])
    }

    #[test]
    fn every_joint_has_one_valid_role() {
        for (j, r) in default_angle_roles().iter().enumerate() {
            match *r {
                AngleRole::Inner { left, right } => {
                    assert!(left < NUM_JOINTS && right < NUM_JOINTS && left != j && right != j)
                }
                AngleRole::Peripheral { adj } => assert!(adj < NUM_JOINTS),
            }
        }
    }

    #[test]
    fn bone_examples() {
        let mut f = [[0.0; 2]; NUM_JOINTS];
        f[9] = [3.0, 4.0];
        f[7] = [1.0, 1.0];
        f[0] = [5.0, 5.0];
        let b = compute_bones(&f, &PARENT);
        assert_eq!(b[9], [2.0, 3.0]);
        assert_eq!(b[0], [0.0, 0.0]);
    }

    #[test]
    fn bones_translation_invariant_and_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng);
        let shifted: Coords = std::array::from_fn(|i| [f[i][0] + 17.0, f[i][1] - 3.0]);
        let scaled: Coords = std::array::from_fn(|i| [f[i][0] * 2.5, f[i][1] * 2.5]);
        let b = compute_bones(&f, &PARENT);
        let bs = compute_bones(&shifted, &PARENT);
        let bk = compute_bones(&scaled, &PARENT);
        for i in 0..NUM_JOINTS {
            for c in 0..2 {
                assert!((b[i][c] - bs[i][c]).abs() < 1e-12);
                assert!((b[i][c] * 2.5 - bk[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn right_knee_three_four_five_triangle() {
        let mut f = [[0.0; 2]; NUM_JOINTS];
        f[12] = [0.0, 0.0];
        f[14] = [0.0, 3.0];
        f[16] = [4.0, 3.0];
        let (a, degenerate) = compute_angles(&f, &default_angle_roles());
        assert_eq!(a[14], FRAC_PI_2);
        assert!(!degenerate.contains(&14));
    }

    #[test]
    fn straight_limb_is_pi() {
        let mut f = [[0.0; 2]; NUM_JOINTS];
        f[12] = [0.0, 0.0];
        f[14] = [0.0, 1.0];
        f[16] = [0.0, 2.0];
        let (a, _) = compute_angles(&f, &default_angle_roles());
        assert_eq!(a[14], PI);
    }

    #[test]
    fn peripheral_unit_slope() {
        let mut f = [[0.0; 2]; NUM_JOINTS];
        f[9] = [1.0, 1.0];
        f[7] = [0.0, 0.0];
        let roles = default_angle_roles();
        let (a, _) = compute_angles(&f, &roles);
        assert!((a[9] - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn zero_side_gives_zero_angle_and_warning() {
        let f = [[0.0; 2]; NUM_JOINTS];
        let (a, degenerate) = compute_angles(&f, &default_angle_roles());
        assert_eq!(a[14], 0.0);
        assert!(degenerate.contains(&14));
    }

    #[test]
    fn angles_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let roles = default_angle_roles();
        for _ in 0..200 {
            let (a, _) = compute_angles(&random_frame(&mut rng), &roles);
            for (j, r) in roles.iter().enumerate() {
                match r {
                    AngleRole::Inner { .. } => assert!((0.0..=PI).contains(&a[j])),
                    AngleRole::Peripheral { .. } => assert!(a[j] > -FRAC_PI_2 && a[j] <= FRAC_PI_2),
                }
            }
        }
    }

    #[test]
    fn inner_angles_invariant_under_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let roles = default_angle_roles();
        for _ in 0..100 {
            let f = random_frame(&mut rng);
            let (s, c) = rng.random_range(-3.0f64..3.0).sin_cos();
            let k = rng.random_range(0.1..10.0);
            let g: Coords = std::array::from_fn(|i| {
                let [x, y] = f[i];
                [k * (c * x - s * y) + 5.0, k * (s * x + c * y) - 9.0]
            });
            let (a, _) = compute_angles(&f, &roles);
            let (b, _) = compute_angles(&g, &roles);
            for (j, r) in roles.iter().enumerate() {
                if let AngleRole::Inner { .. } = r {
                    assert!((a[j] - b[j]).abs() < 1e-9, "joint {j}");
                }
            }
        }
    }

    #[test]
    fn mirrored_skeleton_bones_and_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let roles = default_angle_roles();
        let f = random_frame(&mut rng);
        let m: Coords = std::array::from_fn(|i| [-f[MIRROR[i]][0], f[MIRROR[i]][1]]);
        let useq = |frames: Vec<Coords>| UnifiedPoseSequence {
            seq_id: "m".into(),
            subject: "s".into(),
            condition: crate::pose_io::Condition::NM,
            view: "0".into(),
            kept_frame_indices: (0..frames.len()).collect(),
            frames,
        };
        let d = build_descriptors(&useq(vec![f]));
        let dm = build_descriptors(&useq(vec![m]));
        for i in 0..NUM_JOINTS {
            let src = MIRROR[i];
            assert_eq!(dm.bone.at(&[0, i, 0]), -d.bone.at(&[0, src, 0]));
            assert_eq!(dm.bone.at(&[0, i, 1]), d.bone.at(&[0, src, 1]));
            if let AngleRole::Inner { .. } = roles[i] {
                assert!((dm.angle.at(&[0, i, 0]) - d.angle.at(&[0, src, 0])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn descriptor_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng);
        let d = descriptors_from_frames(&[f, f, f], "x");
        assert_eq!(d.joint.shape(), &[3, 17, 2]);
        assert_eq!(d.bone.shape(), &[3, 17, 2]);
        assert_eq!(d.angle.shape(), &[3, 17, 1]);
        assert_eq!(d.angle.at(&[0, 9, 0]), d.angle.at(&[2, 9, 0]));
        assert_eq!(d.joint.at(&[1, 4, 1]), f[4][1]);
    }
}
