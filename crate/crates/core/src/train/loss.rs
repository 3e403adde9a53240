//! Per-slot losses with their analytic gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss over `n` row-major features of width `e`.
///
/// Per anchor: hardest (farthest) positive and hardest (closest) negative,
/// first index on ties, hinge `max(0, d_ap - d_an + margin)`. Anchors without
/// a positive or a negative are skipped; the loss is the mean over the rest,
/// or 0 when every anchor was skipped. Returns the loss and `d loss / d x`.
pub fn triplet_batch_hard(x: &[f64], e: usize, labels: &[usize], margin: f64) -> (f64, Vec<f64>) {
    let n = labels.len();
    assert_eq!(x.len(), n * e, "feature buffer does not match label count");
    let row = |i: usize| &x[i * e..(i + 1) * e];
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(row(i), row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut grad = vec![0.0; n * e];
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut active = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else {
            continue;
        };
        valid += 1;
        let l = dist[a * n + p] - dist[a * n + q] + margin;
        if l > 0.0 {
            total += l;
            active.push((a, p, q));
        }
    }
    if valid == 0 {
        log::warn!("triplet loss: no anchor has both a positive and a negative");
        return (0.0, grad);
    }

    let w = 1.0 / valid as f64;
    let mut push_dist_grad = |i: usize, j: usize, sign: f64| {
        let d = dist[i * n + j];
        if d == 0.0 {
            return;
        }
        for c in 0..e {
            let g = sign * w * (x[i * e + c] - x[j * e + c]) / d;
            grad[i * e + c] += g;
            grad[j * e + c] -= g;
        }
    };
    for (a, p, q) in active {
        push_dist_grad(a, p, 1.0);
        push_dist_grad(a, q, -1.0);
    }
    (total * w, grad)
}

/// Mean softmax cross-entropy of `n` rows of `k` logits. Labels must be
/// below `k`.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = labels.len();
    assert_eq!(logits.len(), n * k, "logit buffer does not match label count");
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y];
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[i * k + c] = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (total / n as f64, grad)
}

pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::Invalid(format!("label {y} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

/// `mean_s (triplet_s + gamma * ce_s)`.
pub fn combined_loss(triplet: &[f64], ce: &[f64], gamma: f64) -> f64 {
    assert_eq!(triplet.len(), ce.len());
    let sum: f64 = triplet.iter().zip(ce).map(|(t, c)| t + gamma * c).sum();
    sum / triplet.len() as f64
}

/// Per-slot losses and their combination, recorded on the tape.
pub struct LossVars {
    pub triplet: Var,
    pub cross_entropy: Var,
    pub total: Var,
}

pub fn combined_loss_on_tape(
    tape: &mut Tape,
    metric: Var,
    logits: Var,
    labels: &[usize],
    margin: f64,
    gamma: f64,
) -> LossVars {
    let triplet = tape.triplet_per_slot(metric, labels, margin);
    let cross_entropy = tape.cross_entropy_per_slot(logits, labels);
    let weighted = tape.scale(cross_entropy, gamma);
    let sum = tape.add(triplet, weighted);
    let total = tape.mean_all(sum);
    LossVars {
        triplet,
        cross_entropy,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hinge_inactive_and_active() {
        // anchor 0 at origin; positive 1 at distance 1; negative 2 at distance 3.
        let x = [0.0, 1.0, 3.0, 10.0];
        let (l, _) = triplet_batch_hard(&x, 1, &[0, 0, 1, 1], 0.2);
        // anchors: 0 -> 1 - 3 + .2 < 0; 1 -> 1 - 2 + .2 < 0; 2 -> 7 - 2 + .2; 3 -> 7 - 9 + .2 < 0
        assert!((l - 5.2 / 4.0).abs() < 1e-12);

        let x = [0.0, 2.0, 1.0, 1.0];
        let (l, _) = triplet_batch_hard(&x[..3], 1, &[0, 0, 1], 0.2);
        // anchor 0: 2 - 1 + .2 = 1.2; anchor 1: 2 - 1 + .2 = 1.2; anchor 2 skipped
        assert!((l - 1.2).abs() < 1e-12);
    }

    #[test]
    fn all_anchors_skipped_gives_zero() {
        let (l, g) = triplet_batch_hard(&[1.0, 2.0], 1, &[0, 1], 0.2);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&[0.0, 0.0], 2, &[0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = cross_entropy(&[1000.0, -1000.0], 2, &[0]);
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.5).collect();
        let a = cross_entropy(&z, 3, &[0, 2, 1, 1]).0;
        let b = cross_entropy(&shifted, 3, &[0, 2, 1, 1]).0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = [0, 0, 1, 1, 2, 2];
        let x: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = triplet_batch_hard(&x, 3, &labels, 0.5);
        let h = 1e-7;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let num =
                (triplet_batch_hard(&p, 3, &labels, 0.5).0 - triplet_batch_hard(&m, 3, &labels, 0.5).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn combined_examples() {
        let t = [0.3; 18];
        let c = [0.3; 18];
        assert!((combined_loss(&t, &c, 1.0) - 0.6).abs() < 1e-12);
        assert!((combined_loss(&t, &[5.0; 18], 0.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn labels_checked() {
        assert!(check_labels(&[0, 1], 2).is_ok());
        assert!(check_labels(&[0, 2], 2).is_err());
    }
}
