//! Scalar-loop reference implementations used as test oracles. Everything
//! here is written with explicit index loops over nested vectors and shares
//! no code with the tape-based implementation beyond reading parameters.

#![allow(dead_code)]

pub mod checks;

use gpgait::graph::SchemeName;
use gpgait::pagcn::{BlockParams, BnParams, HeadParams, Network, ParamId, PARTS_PER_BRANCH};
use gpgait::tensor::Tensor;

pub const V: usize = 17;
pub const EPS: f64 = 1e-5;

/// `x[n][t][v][c]`
pub type X4 = Vec<Vec<Vec<Vec<f64>>>>;

pub fn to_x4(t: &Tensor) -> X4 {
    let s = t.shape();
    (0..s[0])
        .map(|a| {
            (0..s[1])
                .map(|b| {
                    (0..s[2])
                        .map(|c| (0..s[3]).map(|d| t.at(&[a, b, c, d])).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn from_x4(x: &X4) -> Tensor {
    let shape = [x.len(), x[0].len(), x[0][0].len(), x[0][0][0].len()];
    let data: Vec<f64> = x.iter().flatten().flatten().flatten().copied().collect();
    Tensor::from_vec(&shape, data).unwrap()
}

pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s[0]).map(|i| (0..s[1]).map(|j| t.at(&[i, j])).collect()).collect()
}

fn p(net: &Network, id: ParamId) -> Tensor {
    net.store.get(id).clone()
}

/// Attention adjacency `[n][v][w]`, rows softmaxed over the joints allowed by
/// the mask.
pub fn ref_attention(x: &X4, wq: &[Vec<f64>], wk: &[Vec<f64>], mask: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let (tn, c, e) = (x[0].len(), x[0][0][0].len(), wq[0].len());
    x.iter()
        .map(|seq| {
            let mut pooled = vec![vec![0.0; c]; V];
            for frame in seq {
                for v in 0..V {
                    for ch in 0..c {
                        pooled[v][ch] += frame[v][ch] / tn as f64;
                    }
                }
            }
            let proj = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
                (0..V)
                    .map(|v| {
                        (0..e)
                            .map(|j| (0..c).map(|ch| pooled[v][ch] * w[ch][j]).sum())
                            .collect()
                    })
                    .collect()
            };
            let (q, k) = (proj(wq), proj(wk));
            (0..V)
                .map(|i| {
                    let s: Vec<f64> = (0..V)
                        .map(|j| (0..e).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (e as f64).sqrt())
                        .collect();
                    let m = (0..V)
                        .filter(|&j| mask[i][j] != 0.0)
                        .map(|j| s[j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..V).filter(|&j| mask[i][j] != 0.0).map(|j| (s[j] - m).exp()).sum();
                    (0..V)
                        .map(|j| if mask[i][j] != 0.0 { (s[j] - m).exp() / z } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Running statistics observed by the reference batch norms, in call order.
#[derive(Default, Debug)]
pub struct Observed {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

fn bn_channels(
    net: &Network,
    bn: &BnParams,
    values: &mut [&mut f64],
    channel: &[usize],
    c: usize,
    train: bool,
    obs: &mut Observed,
) {
    let g = p(net, bn.gamma);
    let b = p(net, bn.beta);
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut cnt = vec![0.0; c];
        for (v, &ch) in values.iter().zip(channel) {
            mean[ch] += **v;
            cnt[ch] += 1.0;
        }
        for ch in 0..c {
            mean[ch] /= cnt[ch];
        }
        let mut var = vec![0.0; c];
        for (v, &ch) in values.iter().zip(channel) {
            var[ch] += (**v - mean[ch]).powi(2);
        }
        for ch in 0..c {
            var[ch] /= cnt[ch];
        }
        obs.means.push(mean.clone());
        obs.vars.push(var.clone());
        (mean, var)
    } else {
        (
            p(net, bn.running_mean).data().to_vec(),
            p(net, bn.running_var).data().to_vec(),
        )
    };
    for (v, &ch) in values.iter_mut().zip(channel) {
        **v = (**v - mean[ch]) / (var[ch] + EPS).sqrt() * g.data()[ch] + b.data()[ch];
    }
}

fn bn4(net: &Network, bn: &BnParams, x: &mut X4, train: bool, obs: &mut Observed) {
    let c = x[0][0][0].len();
    let mut channel = Vec::new();
    let mut refs: Vec<&mut f64> = Vec::new();
    for seq in x.iter_mut() {
        for frame in seq.iter_mut() {
            for joint in frame.iter_mut() {
                for (ch, val) in joint.iter_mut().enumerate() {
                    channel.push(ch);
                    refs.push(val);
                }
            }
        }
    }
    bn_channels(net, bn, &mut refs, &channel, c, train, obs);
}

/// One block. `mask` is the mask the block runs with.
pub fn ref_block(net: &Network, block: &BlockParams, x: &X4, mask: &[Vec<f64>], train: bool, obs: &mut Observed) -> X4 {
    let (n, t, cin) = (x.len(), x[0].len(), x[0][0][0].len());
    let cout = block.out_channels;
    let mut y = vec![vec![vec![vec![0.0; cout]; V]; t]; n];
    for (k, sp) in block.subsets.iter().enumerate() {
        let a = mat(&net.graph.subsets.normalized[k]);
        let bk = mat(&p(net, sp.learned_adj));
        let w = mat(&p(net, sp.weight));
        let att = sp
            .attention
            .map(|(q, kk)| ref_attention(x, &mat(&p(net, q)), &mat(&p(net, kk)), mask));
        for b in 0..n {
            for f in 0..t {
                for dst in 0..V {
                    let mut agg = vec![0.0; cin];
                    for src in 0..V {
                        let c_att = att.as_ref().map_or(0.0, |a3| a3[b][src][dst]);
                        let weight = mask[src][dst] * (a[src][dst] + bk[src][dst] + c_att);
                        for ch in 0..cin {
                            agg[ch] += x[b][f][src][ch] * weight;
                        }
                    }
                    for o in 0..cout {
                        for ch in 0..cin {
                            y[b][f][dst][o] += agg[ch] * w[ch][o];
                        }
                    }
                }
            }
        }
    }
    bn4(net, &block.bn_spatial, &mut y, train, obs);
    relu4(&mut y);
    let wt = mat(&p(net, block.temporal));
    let kernel = wt.len() as isize;
    let mut z = vec![vec![vec![vec![0.0; cout]; V]; t]; n];
    for b in 0..n {
        for f in 0..t as isize {
            for j in 0..kernel {
                let src = f + j - kernel / 2;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for v in 0..V {
                    for ch in 0..cout {
                        z[b][f as usize][v][ch] += wt[j as usize][ch] * y[b][src as usize][v][ch];
                    }
                }
            }
        }
    }
    bn4(net, &block.bn_temporal, &mut z, train, obs);
    relu4(&mut z);
    if cin == cout {
        for b in 0..n {
            for f in 0..t {
                for v in 0..V {
                    for ch in 0..cout {
                        z[b][f][v][ch] += x[b][f][v][ch];
                    }
                }
            }
        }
    }
    z
}

fn relu4(x: &mut X4) {
    x.iter_mut().flatten().flatten().flatten().for_each(|v| *v = v.max(0.0));
}

/// Per-sequence part vectors `[n][part][c]`: mean + max over the part's
/// joints per frame, then max over frames.
pub fn ref_pool(x: &X4, parts: &[Vec<usize>]) -> Vec<Vec<Vec<f64>>> {
    let c = x[0][0][0].len();
    x.iter()
        .map(|seq| {
            parts
                .iter()
                .map(|part| {
                    (0..c)
                        .map(|ch| {
                            seq.iter()
                                .map(|frame| {
                                    let vals: Vec<f64> = part.iter().map(|&j| frame[j][ch]).collect();
                                    vals.iter().sum::<f64>() / vals.len() as f64
                                        + vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                                })
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Head of one slot on `[n][c]`, giving `(metric, logits)`.
pub fn ref_head(
    net: &Network,
    head: &HeadParams,
    x: &[Vec<f64>],
    train: bool,
    obs: &mut Observed,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let fc = mat(&p(net, head.fc));
    let cls = mat(&p(net, head.classifier));
    let e = fc[0].len();
    let metric: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            (0..e)
                .map(|o| (0..row.len()).map(|c| row[c] * fc[c][o]).sum())
                .collect()
        })
        .collect();
    let mut neck = metric.clone();
    {
        let mut channel = Vec::new();
        let mut refs: Vec<&mut f64> = Vec::new();
        for row in neck.iter_mut() {
            for (ch, v) in row.iter_mut().enumerate() {
                channel.push(ch);
                refs.push(v);
            }
        }
        bn_channels(net, &head.bnneck, &mut refs, &channel, e, train, obs);
    }
    let k = cls[0].len();
    let logits = neck
        .iter()
        .map(|row| (0..k).map(|o| (0..e).map(|c| row[c] * cls[c][o]).sum()).collect())
        .collect();
    (metric, logits)
}

/// Whole network: `[n][slot][e]` metric features and `[n][slot][k]` logits.
pub fn ref_network(net: &Network, inputs: &[Tensor], train: bool) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let mut obs = Observed::default();
    let parts = net.graph.pooling_parts();
    let n = inputs[0].shape()[0];
    let slots = net.branches.len() * PARTS_PER_BRANCH;
    let mut metric = vec![vec![Vec::new(); slots]; n];
    let mut logits = vec![vec![Vec::new(); slots]; n];
    for (bi, branch) in net.branches.iter().enumerate() {
        let mut x = to_x4(&inputs[bi]);
        for block in &branch.blocks {
            let mask = if net.config.partition {
                mat(net.graph.mask(block.scheme))
            } else {
                mat(net.graph.mask(SchemeName::Global))
            };
            x = ref_block(net, block, &x, &mask, train, &mut obs);
        }
        let pooled = ref_pool(&x, &parts);
        for pi in 0..PARTS_PER_BRANCH {
            let rows: Vec<Vec<f64>> = pooled.iter().map(|s| s[pi].clone()).collect();
            let slot = bi * PARTS_PER_BRANCH + pi;
            let (m, l) = ref_head(net, &net.heads[slot], &rows, train, &mut obs);
            for b in 0..n {
                metric[b][slot] = m[b].clone();
                logits[b][slot] = l[b].clone();
            }
        }
    }
    (metric, logits)
}

/// Brute-force batch-hard triplet loss: for every anchor, the largest hinge
/// over all (positive, negative) pairs equals the hinge of the hardest pair.
pub fn brute_triplet(x: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..x.len() {
        let mut worst: Option<f64> = None;
        for p in 0..x.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..x.len() {
                if labels[q] == labels[a] {
                    continue;
                }
                let h = d(&x[a], &x[p]) - d(&x[a], &x[q]) + margin;
                worst = Some(worst.map_or(h, |w: f64| w.max(h)));
            }
        }
        if let Some(w) = worst {
            total += w.max(0.0);
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Scalar softmax cross-entropy without any stabilization tricks beyond
/// subtracting the row maximum.
pub fn brute_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = probs.iter().sum();
        total -= (probs[y] / z).ln();
    }
    total / logits.len() as f64
}

/// Fill every parameter with seeded random values so that identity-like
/// initializations cannot hide mistakes. Running variances stay positive.
pub fn randomize(net: &mut Network, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = net.store.ids().collect();
    for id in ids {
        let positive = net.store.entry(id).name.ends_with("running_var");
        for v in net.store.get_mut(id).data_mut() {
            *v = if positive {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
}

/// Random branch inputs `[n, t, 17, c]` for every branch of `net`.
pub fn random_inputs(net: &Network, n: usize, t: usize, seed: u64) -> Vec<Tensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    net.branches
        .iter()
        .map(|b| {
            let c = b.kind.in_channels();
            let data = (0..n * t * V * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[n, t, V, c], data).unwrap()
        })
        .collect()
}

pub fn max_diff3(a: &[Vec<Vec<f64>>], b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, slots) in a.iter().enumerate() {
        for (s, row) in slots.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((v - b.at(&[i, s, j])).abs());
            }
        }
    }
    worst
}
