//! Whole-network checks shared by the oracle tests and the acceptance run.

use super::*;
use gpgait::pagcn::{pagcn_spatial, BranchKind, Ctx, Mode, NetworkConfig};
use gpgait::train::loss::combined_loss_on_tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny network with every parameter randomized.
pub fn tiny(seed: u64) -> Network {
    let mut cfg = NetworkConfig::tiny(2);
    cfg.init_seed = seed;
    let mut net = Network::new(cfg).unwrap();
    randomize(&mut net, seed + 100);
    net
}

/// Softmax attention over a sub-skeleton of `x[n][t][j][c]`, computed without
/// any mask.
fn attention_sub(x: &X4, wq: &[Vec<f64>], wk: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let (t, j, c, e) = (x[0].len(), x[0][0].len(), x[0][0][0].len(), wq[0].len());
    x.iter()
        .map(|seq| {
            let pooled: Vec<Vec<f64>> = (0..j)
                .map(|v| {
                    (0..c)
                        .map(|ch| seq.iter().map(|f| f[v][ch]).sum::<f64>() / t as f64)
                        .collect()
                })
                .collect();
            let proj = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
                pooled
                    .iter()
                    .map(|p| (0..e).map(|o| (0..c).map(|ch| p[ch] * w[ch][o]).sum()).collect())
                    .collect()
            };
            let (q, k) = (proj(wq), proj(wk));
            (0..j)
                .map(|a| {
                    let s: Vec<f64> = (0..j)
                        .map(|b| (0..e).map(|d| q[a][d] * k[b][d]).sum::<f64>() / (e as f64).sqrt())
                        .collect();
                    let z: f64 = s.iter().map(|v| v.exp()).sum();
                    s.iter().map(|v| v.exp() / z).collect()
                })
                .collect()
        })
        .collect()
}

/// Worst deviation, over `draws` random networks and inputs, between the
/// parts5-masked spatial layer and running every part as its own small graph.
pub fn spatial_mask_error(draws: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let net = tiny(1000 + draw);
        let parts = net.graph.schemes[&SchemeName::Parts5].groups.clone();
        let block = &net.branches[0].blocks[0];
        let mask = net.graph.mask(SchemeName::Parts5);
        let x = random_inputs(&net, 2, 3, draw).remove(0);
        let mut ctx = Ctx::new(&net.store, Mode::Eval, false);
        let xv = ctx.tape.constant(x.clone());
        let y = pagcn_spatial(&mut ctx, xv, &block.subsets, &net.graph.subsets.normalized, mask);
        let y = ctx.value(y).clone();

        let x4 = to_x4(&x);
        let (n, t, cin, cout) = (2, 3, 2, block.out_channels);
        let mut expected = vec![vec![vec![vec![0.0; cout]; V]; t]; n];
        for part in &parts {
            let sub: X4 = x4
                .iter()
                .map(|s| s.iter().map(|f| part.iter().map(|&v| f[v].clone()).collect()).collect())
                .collect();
            for (k, sp) in block.subsets.iter().enumerate() {
                let a = mat(&net.graph.subsets.normalized[k]);
                let b = mat(net.store.get(sp.learned_adj));
                let w = mat(net.store.get(sp.weight));
                let (q, kk) = sp.attention.unwrap();
                let att = attention_sub(&sub, &mat(net.store.get(q)), &mat(net.store.get(kk)));
                for bi in 0..n {
                    for f in 0..t {
                        for (di, &dst) in part.iter().enumerate() {
                            for (si, &src) in part.iter().enumerate() {
                                let weight = a[src][dst] + b[src][dst] + att[bi][si][di];
                                for o in 0..cout {
                                    for ch in 0..cin {
                                        expected[bi][f][dst][o] += sub[bi][f][si][ch] * weight * w[ch][o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        worst = worst.max(from_x4(&expected).max_abs_diff(&y));
    }
    worst
}

/// Joint branch with three parts5 blocks and nothing else.
pub fn parts5_stack(seed: u64) -> Network {
    let mut cfg = NetworkConfig::tiny(2);
    cfg.branches = vec![BranchKind::Joint];
    cfg.part_channels = vec![4, 4, 4];
    cfg.larger_schemes.clear();
    let mut net = Network::new(cfg).unwrap();
    randomize(&mut net, seed);
    net
}

/// Inference-mode keypoint features of the first branch.
pub fn stack_output(net: &Network, x: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(&net.store, Mode::Eval, false);
    let xv = ctx.tape.constant(x.clone());
    let y = net.branch_forward(&mut ctx, &net.branches[0], xv);
    ctx.value(y).clone()
}

/// Joints whose features are bit-identical in `a` and `b` `[N, T, 17, C]`.
pub fn unchanged_rows(a: &Tensor, b: &Tensor) -> Vec<usize> {
    let s = a.shape();
    (0..V)
        .filter(|&v| {
            (0..s[0]).all(|n| (0..s[1]).all(|t| (0..s[3]).all(|c| a.at(&[n, t, v, c]) == b.at(&[n, t, v, c]))))
        })
        .collect()
}

pub fn perturb(x: &Tensor, joints: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = x.clone();
    let s = x.shape().to_vec();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for &v in joints {
                for c in 0..s[3] {
                    y.set(&[n, t, v, c], x.at(&[n, t, v, c]) + rng.random_range(-2.0..2.0));
                }
            }
        }
    }
    y
}

/// Perturb every part in turn and list the cases where a joint outside the
/// part changed, or a joint inside it stayed put.
pub fn isolation_violations(seeds: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut out = Vec::new();
    for seed in 0..seeds {
        let net = parts5_stack(seed);
        let x = random_inputs(&net, 2, 5, seed + 50).remove(0);
        let base = stack_output(&net, &x);
        for part in &net.graph.schemes[&SchemeName::Parts5].groups {
            let after = stack_output(&net, &perturb(&x, part, &mut rng));
            let expected: Vec<usize> = (0..V).filter(|v| !part.contains(v)).collect();
            let got = unchanged_rows(&base, &after);
            if got != expected {
                out.push(format!("seed {seed} part {part:?}: unchanged {got:?}"));
            }
        }
    }
    out
}

const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

fn combined(net: &Network, inputs: &[Tensor], labels: &[usize], grad: bool) -> (f64, Vec<Option<Tensor>>) {
    let mut ctx = Ctx::new(&net.store, Mode::Train, grad);
    let out = net.forward(&mut ctx, inputs).unwrap();
    let lv = combined_loss_on_tape(&mut ctx.tape, out.metric, out.logits, labels, 0.2, 1.0);
    let value = ctx.value(lv.total).item();
    let grads = if grad {
        ctx.param_grads(&ctx.tape.backward(lv.total))
    } else {
        Vec::new()
    };
    (value, grads)
}

/// Entries of each learned adjacency that the block's mask removes. These
/// cannot influence the loss and are checked in bulk.
fn masked_out(net: &Network) -> Vec<Option<Vec<bool>>> {
    let mut out = vec![None; net.store.len()];
    for branch in &net.branches {
        for block in &branch.blocks {
            let mask = net.mask_for(block.scheme);
            for sp in &block.subsets {
                out[sp.learned_adj.index()] = Some(mask.data().iter().map(|&m| m == 0.0).collect());
            }
        }
    }
    out
}

fn tensor_error(
    net: &mut Network,
    index: usize,
    analytic: &Tensor,
    skip: Option<&Vec<bool>>,
    inputs: &[Tensor],
    labels: &[usize],
) -> f64 {
    let id = net.store.ids().nth(index).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        if skip.is_some_and(|s| s[i]) {
            continue;
        }
        let orig = net.store.get(id).data()[i];
        net.store.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = combined(net, inputs, labels, false).0;
        net.store.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = combined(net, inputs, labels, false).0;
        net.store.get_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR));
    }
    worst
}

pub struct GradReport {
    pub tensors: usize,
    pub worst: f64,
    pub worst_name: String,
    pub problems: Vec<String>,
}

/// Analytic gradient of the combined loss against central differences for
/// every trainable tensor of a tiny network (T=3, two identities).
pub fn gradient_check() -> GradReport {
    let mut net = Network::new(NetworkConfig::tiny(2)).unwrap();
    randomize(&mut net, 2024);
    let inputs = random_inputs(&net, 4, 3, 7);
    let labels = [0, 0, 1, 1];
    let (base, grads) = combined(&net, &inputs, &labels, true);
    let mut report = GradReport {
        tensors: 0,
        worst: 0.0,
        worst_name: String::new(),
        problems: Vec::new(),
    };

    // masked-out adjacency entries: zero analytic gradient, and moving all of
    // them at once leaves the loss bit-identical
    let skip = masked_out(&net);
    let mut moved = net.clone();
    for (index, s) in skip.iter().enumerate() {
        let Some(s) = s else { continue };
        let id = moved.store.ids().nth(index).unwrap();
        let g = grads[index].as_ref().unwrap();
        for (i, v) in moved.store.get_mut(id).data_mut().iter_mut().enumerate() {
            if s[i] {
                if g.data()[i] != 0.0 {
                    report
                        .problems
                        .push(format!("{}: masked entry {i} has gradient", net.store.entry(id).name));
                }
                *v += 0.75;
            }
        }
    }
    if combined(&moved, &inputs, &labels, false).0 != base {
        report
            .problems
            .push("masked-out adjacency entries changed the loss".into());
    }

    let trainable: Vec<(usize, String)> = net
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, e)| (i, e.name.clone()))
        .collect();
    for (index, name) in trainable {
        let Some(analytic) = grads[index].clone() else {
            report.problems.push(format!("{name} has no gradient"));
            continue;
        };
        let err = tensor_error(&mut net, index, &analytic, skip[index].as_ref(), &inputs, &labels);
        if err > report.worst {
            report.worst = err;
            report.worst_name = name.clone();
        }
        if err > 1e-4 {
            report.problems.push(format!("{name}: {err:e}"));
        }
        report.tensors += 1;
    }
    report
}
