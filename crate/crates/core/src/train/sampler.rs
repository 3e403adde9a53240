use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hot::{Coords, UnifiedPoseSequence};

/// Unified training sequences grouped by identity.
#[derive(Debug, Clone)]
pub struct TrainSet {
    /// Subject name of each class index.
    pub subjects: Vec<String>,
    /// Sequences of each class.
    pub sequences: Vec<Vec<UnifiedPoseSequence>>,
}

impl TrainSet {
    /// Group by subject; classes are numbered in order of first appearance
    /// after sorting subject names.
    pub fn new(seqs: Vec<UnifiedPoseSequence>) -> Self {
        let mut subjects: Vec<String> = seqs.iter().map(|s| s.subject.clone()).collect();
        subjects.sort();
        subjects.dedup();
        let mut sequences = vec![Vec::new(); subjects.len()];
        for s in seqs {
            let c = subjects.binary_search(&s.subject).unwrap();
            sequences[c].push(s);
        }
        Self { subjects, sequences }
    }

    pub fn num_classes(&self) -> usize {
        self.subjects.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub label: usize,
    pub frames: Vec<Coords>,
}

/// Draw `l` frames: a random subset in random order, or with replacement
/// when the sequence is shorter than `l`.
pub fn sample_frames(frames: &[Coords], l: usize, rng: &mut impl Rng) -> Vec<Coords> {
    if frames.len() >= l {
        index::sample(rng, frames.len(), l)
            .into_iter()
            .map(|i| frames[i])
            .collect()
    } else {
        (0..l).map(|_| frames[rng.random_range(0..frames.len())]).collect()
    }
}

/// `p` distinct identities with `k` sequences each, `l` frames per sequence.
pub fn sample_batch(set: &TrainSet, p: usize, k: usize, l: usize, rng: &mut impl Rng) -> Result<Vec<SampledClip>> {
    let eligible: Vec<usize> = (0..set.num_classes())
        .filter(|&c| !set.sequences[c].is_empty())
        .collect();
    if eligible.len() < p {
        return Err(Error::Invalid(format!(
            "batch needs {p} identities, training set has {}",
            eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for i in index::sample(rng, eligible.len(), p) {
        let label = eligible[i];
        let seqs = &set.sequences[label];
        let picks: Vec<usize> = if seqs.len() >= k {
            index::sample(rng, seqs.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..seqs.len())).collect()
        };
        for s in picks {
            out.push(SampledClip {
                label,
                frames: sample_frames(&seqs[s].frames, l, rng),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::Condition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn useq(subject: &str, t: usize) -> UnifiedPoseSequence {
        let frames: Vec<Coords> = (0..t).map(|f| [[f as f64, 0.0]; 17]).collect();
        UnifiedPoseSequence {
            seq_id: format!("{subject}-{t}"),
            subject: subject.into(),
            condition: Condition::NM,
            view: "0".into(),
            kept_frame_indices: (0..t).collect(),
            frames,
        }
    }

    fn toy() -> TrainSet {
        TrainSet::new(vec![useq("a", 10), useq("a", 12), useq("b", 2), useq("c", 9)])
    }

    #[test]
    fn shape_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&toy(), 2, 2, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|c| c.frames.len() == 4));
        let mut labels: Vec<usize> = b.iter().map(|c| c.label).collect();
        labels.dedup();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn short_sequence_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = useq("b", 2);
        let f = sample_frames(&s.frames, 4, &mut rng);
        assert_eq!(f.len(), 4);
        let mut xs: Vec<i64> = f.iter().map(|c| c[0][0] as i64).collect();
        xs.sort();
        xs.dedup();
        assert!(xs.len() < 4);
    }

    #[test]
    fn deterministic() {
        let a = sample_batch(&toy(), 3, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&toy(), 3, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_identities() {
        assert!(sample_batch(&toy(), 4, 2, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
