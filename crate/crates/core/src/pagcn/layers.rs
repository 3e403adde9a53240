//! PAGCN building blocks expressed as tape operations.

use crate::autograd::{Gradients, Tape, Var};
use crate::graph::SchemeName;
use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in every update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsetParams {
    /// `[C_in, C_out]`
    pub weight: ParamId,
    /// Learned adjacency `[V, V]`.
    pub learned_adj: ParamId,
    /// Query and key projections `[C_in, C_e]` of the attention adjacency.
    pub attention: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParams {
    pub scheme: SchemeName,
    pub in_channels: usize,
    pub out_channels: usize,
    pub subsets: Vec<SubsetParams>,
    pub bn_spatial: BnParams,
    /// Per-channel temporal filter `[K, C_out]`.
    pub temporal: ParamId,
    pub bn_temporal: BnParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    /// `[C, E]`
    pub fc: ParamId,
    pub bnneck: BnParams,
    /// `[E, classes]`
    pub classifier: ParamId,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Tensor,
    /// Unbiased batch variance.
    pub batch_var: Tensor,
}

/// A forward pass: the tape plus the binding of parameters to tape variables.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grad: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, track_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grad,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = if self.track_grad && entry.trainable {
            self.tape.leaf(entry.tensor.clone())
        } else {
            self.tape.constant(entry.tensor.clone())
        };
        self.bound[id.index()] = Some(v);
        v
    }

    /// Gradient of every parameter touched by the pass, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

pub fn batch_norm(ctx: &mut Ctx, x: Var, bn: &BnParams) -> Var {
    let gamma = ctx.param(bn.gamma);
    let beta = ctx.param(bn.beta);
    match ctx.mode {
        Mode::Train => {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS);
            let m = stats.count as f64;
            let unbiased = if stats.count > 1 {
                stats.var.scale(m / (m - 1.0))
            } else {
                stats.var
            };
            ctx.bn_updates.push(BnUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                batch_mean: stats.mean,
                batch_var: unbiased,
            });
            y
        }
        Mode::Eval => {
            let rm = ctx.store.get(bn.running_mean).clone();
            let rv = ctx.store.get(bn.running_var).clone();
            ctx.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

/// Apply running-statistic updates collected during a training pass.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let rm = store
            .get(u.running_mean)
            .zip_map(&u.batch_mean, |r, b| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b);
        let rv = store
            .get(u.running_var)
            .zip_map(&u.batch_var, |r, b| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b);
        *store.get_mut(u.running_mean) = rm;
        *store.get_mut(u.running_var) = rv;
    }
}

/// Attention adjacency `[N, V, V]`: temporally mean-pooled features are
/// projected by the query and key maps, compared by scaled dot product and
/// row-softmaxed over the joints allowed by `mask`.
pub fn attention_adjacency(ctx: &mut Ctx, x: Var, query: ParamId, key: ParamId, mask: &Tensor) -> Var {
    let pooled = ctx.tape.mean_time(x);
    let wq = ctx.param(query);
    let wk = ctx.param(key);
    let embed = ctx.value(wq).shape()[1];
    let q = ctx.tape.matmul(pooled, wq);
    let k = ctx.tape.matmul(pooled, wk);
    let logits = ctx.tape.attention_logits(q, k, 1.0 / (embed as f64).sqrt());
    ctx.tape.masked_softmax(logits, mask)
}

/// `Σ_k W_k (f_in ((A_k + B_k + C_k) ⊙ M))` for features `[N, T, V, C_in]`.
pub fn pagcn_spatial(ctx: &mut Ctx, x: Var, subsets: &[SubsetParams], fixed: &[Tensor], mask: &Tensor) -> Var {
    assert_eq!(subsets.len(), fixed.len(), "one fixed adjacency per subset");
    let batch = ctx.value(x).shape()[0];
    let mut acc = None;
    for (sp, a) in subsets.iter().zip(fixed) {
        let attention = sp.attention.map(|(q, k)| attention_adjacency(ctx, x, q, k, mask));
        let learned = ctx.param(sp.learned_adj);
        let adj = ctx.tape.combine_adjacency(a, learned, attention, mask, batch);
        let agg = ctx.tape.graph_aggregate_within(x, adj, Some(mask));
        let w = ctx.param(sp.weight);
        let y = ctx.tape.matmul(agg, w);
        acc = Some(match acc {
            None => y,
            Some(prev) => ctx.tape.add(prev, y),
        });
    }
    acc.expect("at least one subset")
}

/// spatial → BN → ReLU → temporal conv → BN → ReLU → identity residual when
/// the channel counts agree.
pub fn pagcn_block(ctx: &mut Ctx, x: Var, block: &BlockParams, fixed: &[Tensor], mask: &Tensor) -> Var {
    let s = pagcn_spatial(ctx, x, &block.subsets, fixed, mask);
    let s = batch_norm(ctx, s, &block.bn_spatial);
    let s = ctx.tape.relu(s);
    let w = ctx.param(block.temporal);
    let t = ctx.tape.temporal_conv(s, w);
    let t = batch_norm(ctx, t, &block.bn_temporal);
    let t = ctx.tape.relu(t);
    if block.in_channels == block.out_channels {
        ctx.tape.add(t, x)
    } else {
        t
    }
}

/// Fully connected metric feature plus BNNeck classifier logits for one slot.
pub fn per_part_head(ctx: &mut Ctx, part: Var, head: &HeadParams) -> (Var, Var) {
    let fc = ctx.param(head.fc);
    let metric = ctx.tape.matmul(part, fc);
    let neck = batch_norm(ctx, metric, &head.bnneck);
    let cls = ctx.param(head.classifier);
    let logits = ctx.tape.matmul(neck, cls);
    (metric, logits)
}
