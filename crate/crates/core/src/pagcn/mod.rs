//! Part-aware graph convolutional network.
//!
//! Each descriptor branch (joint, angle, bone) runs its own stack of
//! parts5-masked blocks followed by a chain of larger-part blocks. The final
//! keypoint features are pooled over six body parts (the five small parts and
//! the whole body) and over time, and every (branch, part) slot owns an
//! independent head producing a metric feature and BNNeck classifier logits.
//!
//! Slot order is branch-major: for the default branch order joint, angle,
//! bone, slots 0..6 are the joint branch's head, left arm, right arm, left
//! leg, right leg and whole body, then the angle branch, then the bone branch.

pub mod layers;
pub mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::graph::{SchemeName, SkeletonGraph, NUM_SUBSETS};
use crate::hod::DescriptorSet;
use crate::pose_io::NUM_JOINTS;
use crate::tensor::Tensor;

pub use layers::{
    apply_bn_updates, attention_adjacency, batch_norm, pagcn_block, pagcn_spatial, per_part_head, BlockParams,
    BnParams, Ctx, HeadParams, Mode, SubsetParams,
};
pub use params::{ParamEntry, ParamId, ParamStore};

/// Number of pooled parts per branch: five small parts plus the whole body.
pub const PARTS_PER_BRANCH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Joint,
    Angle,
    Bone,
    /// Joint, bone and angle channels concatenated into one input.
    Fused,
}

impl BranchKind {
    pub fn in_channels(self) -> usize {
        match self {
            BranchKind::Joint | BranchKind::Bone => 2,
            BranchKind::Angle => 1,
            BranchKind::Fused => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Joint => "joint",
            BranchKind::Angle => "angle",
            BranchKind::Bone => "bone",
            BranchKind::Fused => "fused",
        }
    }

    /// Input tensor `[T, 17, C]` of this branch.
    pub fn select(self, d: &DescriptorSet) -> Tensor {
        match self {
            BranchKind::Joint => d.joint.clone(),
            BranchKind::Angle => d.angle.clone(),
            BranchKind::Bone => d.bone.clone(),
            BranchKind::Fused => {
                let t = d.frames();
                let mut out = Vec::with_capacity(t * NUM_JOINTS * 5);
                for i in 0..t * NUM_JOINTS {
                    out.extend_from_slice(&d.joint.data()[i * 2..i * 2 + 2]);
                    out.extend_from_slice(&d.bone.data()[i * 2..i * 2 + 2]);
                    out.push(d.angle.data()[i]);
                }
                Tensor::from_vec(&[t, NUM_JOINTS, 5], out).unwrap()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub branches: Vec<BranchKind>,
    /// Output widths of the parts5 blocks.
    pub part_channels: Vec<usize>,
    /// Larger-part blocks, in order, each with its own parameters.
    pub larger_schemes: Vec<SchemeName>,
    pub larger_channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub temporal_kernel: usize,
    /// Include the attention adjacency term.
    pub attention: bool,
    /// Use partition masks; when false every block uses the all-ones mask.
    pub partition: bool,
    /// Replacement groups for named partition schemes.
    #[serde(default)]
    pub scheme_overrides: BTreeMap<SchemeName, Vec<Vec<usize>>>,
    /// Seed of the parameter initializer.
    pub init_seed: u64,
}

impl NetworkConfig {
    fn base(part_channels: Vec<usize>, larger: usize, embed: usize, num_classes: usize) -> Self {
        Self {
            branches: vec![BranchKind::Joint, BranchKind::Angle, BranchKind::Bone],
            part_channels,
            larger_schemes: vec![
                SchemeName::UpperLower,
                SchemeName::ThreeGroups,
                SchemeName::LeftRight,
                SchemeName::Global,
            ],
            larger_channels: larger,
            embed_dim: embed,
            num_classes,
            temporal_kernel: 3,
            attention: true,
            partition: true,
            scheme_overrides: BTreeMap::new(),
            init_seed: 0,
        }
    }

    /// Three parts5 blocks (64, 64, 128), larger stage at 128.
    pub fn casiab(num_classes: usize) -> Self {
        Self::base(vec![64, 64, 128], 128, 128, num_classes)
    }

    /// Four parts5 blocks (64, 128, 128, 128), larger stage at 128.
    pub fn oumvlp(num_classes: usize) -> Self {
        Self::base(vec![64, 128, 128, 128], 128, 128, num_classes)
    }

    /// Small network for desk-scale runs.
    pub fn toy(num_classes: usize) -> Self {
        Self::base(vec![8, 8, 16], 16, 16, num_classes)
    }

    /// Minimal network for gradient checks: one parts5 block of width 4,
    /// larger stage of width 4.
    pub fn tiny(num_classes: usize) -> Self {
        Self::base(vec![4], 4, 4, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.branches.is_empty() {
            return bad("at least one branch required");
        }
        if self.part_channels.is_empty() || self.part_channels.contains(&0) {
            return bad("part_channels must be non-empty and positive");
        }
        if self.larger_channels == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return bad("widths and class count must be positive");
        }
        if self.temporal_kernel % 2 == 0 {
            return bad("temporal_kernel must be odd");
        }
        if self.larger_schemes.contains(&SchemeName::Parts5) {
            return bad("larger_schemes may not contain parts5");
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.branches.len() * PARTS_PER_BRANCH
    }

    /// Width of the last block of every branch.
    pub fn final_channels(&self) -> usize {
        if self.larger_schemes.is_empty() {
            *self.part_channels.last().unwrap()
        } else {
            self.larger_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub kind: BranchKind,
    pub blocks: Vec<BlockParams>,
}

/// Per-sequence embedding: one metric feature per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `[slots, embed_dim]`
    pub features: Tensor,
}

impl EmbeddingMatrix {
    pub fn slots(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        let e = self.dim();
        &self.features.data()[s * e..(s + 1) * e]
    }

    /// Concatenation of all slots.
    pub fn flat(&self) -> &[f64] {
        self.features.data()
    }
}

/// Tape variables produced by [`Network::forward`].
pub struct ForwardOutput {
    /// `[N, slots, E]` pre-BNNeck metric features.
    pub metric: Var,
    /// `[N, slots, classes]`
    pub logits: Var,
    /// Final-block keypoint features `[N, T, 17, C]` of every branch.
    pub keypoint_features: Vec<Var>,
}

/// Network structure plus its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub graph: SkeletonGraph,
    pub store: ParamStore,
    pub branches: Vec<BranchParams>,
    pub heads: Vec<HeadParams>,
}

fn add_bn(store: &mut ParamStore, prefix: &str, c: usize) -> BnParams {
    BnParams {
        gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[c]), true),
        beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
        running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
        running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(&[c]), false),
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let graph = SkeletonGraph::new(&config.scheme_overrides)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let v = NUM_JOINTS;

        let mut branches = Vec::new();
        for &kind in &config.branches {
            let mut plan: Vec<(SchemeName, usize)> =
                config.part_channels.iter().map(|&c| (SchemeName::Parts5, c)).collect();
            plan.extend(config.larger_schemes.iter().map(|&s| (s, config.larger_channels)));
            let mut blocks = Vec::new();
            let mut cin = kind.in_channels();
            for (i, (scheme, cout)) in plan.into_iter().enumerate() {
                let prefix = format!("{}.block{i}", kind.as_str());
                let bound = 1.0 / (cin as f64).sqrt();
                let embed = (cin / 4).max(4);
                let subsets = (0..NUM_SUBSETS)
                    .map(|k| {
                        let p = format!("{prefix}.subset{k}");
                        let weight = store.add(
                            format!("{p}.weight"),
                            Tensor::uniform(&[cin, cout], bound, &mut rng),
                            true,
                        );
                        let learned_adj = store.add(format!("{p}.learned_adj"), Tensor::zeros(&[v, v]), true);
                        let attention = config.attention.then(|| {
                            (
                                store.add(
                                    format!("{p}.attn_query"),
                                    Tensor::uniform(&[cin, embed], bound, &mut rng),
                                    true,
                                ),
                                store.add(
                                    format!("{p}.attn_key"),
                                    Tensor::uniform(&[cin, embed], bound, &mut rng),
                                    true,
                                ),
                            )
                        });
                        SubsetParams {
                            weight,
                            learned_adj,
                            attention,
                        }
                    })
                    .collect();
                let bn_spatial = add_bn(&mut store, &format!("{prefix}.bn_spatial"), cout);
                let kernel = config.temporal_kernel;
                let temporal = store.add(
                    format!("{prefix}.temporal"),
                    Tensor::uniform(&[kernel, cout], 1.0 / (kernel as f64).sqrt(), &mut rng),
                    true,
                );
                let bn_temporal = add_bn(&mut store, &format!("{prefix}.bn_temporal"), cout);
                blocks.push(BlockParams {
                    scheme,
                    in_channels: cin,
                    out_channels: cout,
                    subsets,
                    bn_spatial,
                    temporal,
                    bn_temporal,
                });
                cin = cout;
            }
            branches.push(BranchParams { kind, blocks });
        }

        let c = config.final_channels();
        let e = config.embed_dim;
        let heads: Vec<HeadParams> = (0..config.num_slots())
            .map(|s| {
                let prefix = format!("head.slot{s:02}");
                HeadParams {
                    fc: store.add(
                        format!("{prefix}.fc"),
                        Tensor::uniform(&[c, e], 1.0 / (c as f64).sqrt(), &mut rng),
                        true,
                    ),
                    bnneck: add_bn(&mut store, &format!("{prefix}.bnneck"), e),
                    classifier: store.add(
                        format!("{prefix}.classifier"),
                        Tensor::uniform(&[e, config.num_classes], 1.0 / (e as f64).sqrt(), &mut rng),
                        true,
                    ),
                }
            })
            .collect();
        assert_heads_distinct(&heads);

        Ok(Self {
            config,
            graph,
            store,
            branches,
            heads,
        })
    }

    /// Mask used by blocks of `scheme`, honoring the partition switch.
    pub fn mask_for(&self, scheme: SchemeName) -> &Tensor {
        if self.config.partition {
            self.graph.mask(scheme)
        } else {
            self.graph.mask(SchemeName::Global)
        }
    }

    /// Run one branch's block stack on `[N, T, 17, C_in]`.
    pub fn branch_forward(&self, ctx: &mut Ctx, branch: &BranchParams, input: Var) -> Var {
        let fixed = &self.graph.subsets.normalized;
        let mut x = input;
        for block in &branch.blocks {
            x = pagcn_block(ctx, x, block, fixed, self.mask_for(block.scheme));
        }
        x
    }

    /// Full forward pass. `inputs[b]` is the `[N, T, 17, C]` tensor of branch `b`.
    pub fn forward(&self, ctx: &mut Ctx, inputs: &[Tensor]) -> Result<ForwardOutput> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Invalid(format!(
                "expected {} branch inputs, got {}",
                self.branches.len(),
                inputs.len()
            )));
        }
        let parts = self.graph.pooling_parts();
        let mut metrics = Vec::new();
        let mut logits = Vec::new();
        let mut keypoint_features = Vec::new();
        for (b, (branch, input)) in self.branches.iter().zip(inputs).enumerate() {
            let s = input.shape();
            let expected = branch.kind.in_channels();
            if s.len() != 4 || s[2] != NUM_JOINTS || s[3] != expected || s[1] == 0 {
                return Err(Error::Shape {
                    name: format!("{} branch input", branch.kind.as_str()),
                    expected: vec![
                        s.first().copied().unwrap_or(0),
                        s.get(1).copied().unwrap_or(0),
                        NUM_JOINTS,
                        expected,
                    ],
                    actual: s.to_vec(),
                });
            }
            let x = ctx.tape.constant(input.clone());
            let f = self.branch_forward(ctx, branch, x);
            keypoint_features.push(f);
            let pooled = ctx.tape.part_pool(f, &parts);
            let pooled = ctx.tape.max_time(pooled);
            for p in 0..PARTS_PER_BRANCH {
                let part = ctx.tape.select_mid(pooled, p);
                let (m, l) = per_part_head(ctx, part, &self.heads[b * PARTS_PER_BRANCH + p]);
                metrics.push(m);
                logits.push(l);
            }
        }
        Ok(ForwardOutput {
            metric: ctx.tape.stack_mid(&metrics),
            logits: ctx.tape.stack_mid(&logits),
            keypoint_features,
        })
    }

    /// Stack per-sequence descriptors into branch inputs; all sequences must
    /// have the same length.
    pub fn batch_inputs(&self, batch: &[DescriptorSet]) -> Result<Vec<Tensor>> {
        let n = batch.len();
        let t = batch.first().map(DescriptorSet::frames).unwrap_or(0);
        if n == 0 || t == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if batch.iter().any(|d| d.frames() != t) {
            return Err(Error::Invalid("sequences in a batch must share a length".into()));
        }
        Ok(self
            .branches
            .iter()
            .map(|br| {
                let c = br.kind.in_channels();
                let mut data = Vec::with_capacity(n * t * NUM_JOINTS * c);
                for d in batch {
                    data.extend_from_slice(br.kind.select(d).data());
                }
                Tensor::from_vec(&[n, t, NUM_JOINTS, c], data).unwrap()
            })
            .collect())
    }

    /// Inference-mode embeddings of a batch of equal-length sequences.
    pub fn embed(&self, batch: &[DescriptorSet]) -> Result<Vec<EmbeddingMatrix>> {
        let inputs = self.batch_inputs(batch)?;
        let mut ctx = Ctx::new(&self.store, Mode::Eval, false);
        let out = self.forward(&mut ctx, &inputs)?;
        Ok(split_embeddings(ctx.value(out.metric)))
    }
}

/// Split `[N, S, E]` into per-sequence embeddings.
pub fn split_embeddings(metric: &Tensor) -> Vec<EmbeddingMatrix> {
    let (n, s, e) = (metric.shape()[0], metric.shape()[1], metric.shape()[2]);
    (0..n)
        .map(|b| EmbeddingMatrix {
            features: Tensor::from_vec(&[s, e], metric.data()[b * s * e..(b + 1) * s * e].to_vec()).unwrap(),
        })
        .collect()
}

fn assert_heads_distinct(heads: &[HeadParams]) {
    let mut seen = std::collections::HashSet::new();
    for h in heads {
        for id in [
            h.fc,
            h.classifier,
            h.bnneck.gamma,
            h.bnneck.beta,
            h.bnneck.running_mean,
            h.bnneck.running_var,
        ] {
            assert!(seen.insert(id), "head parameter shared between slots");
        }
    }
}

/// Concatenate `E`-vectors of all six pooled parts per branch.
pub fn assemble_embedding(branch_parts: &[Vec<Vec<f64>>]) -> Result<EmbeddingMatrix> {
    let e = branch_parts
        .first()
        .and_then(|b| b.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Invalid("no branch outputs".into()))?;
    let mut data = Vec::new();
    for (b, parts) in branch_parts.iter().enumerate() {
        if parts.len() != PARTS_PER_BRANCH {
            return Err(Error::Invalid(format!(
                "branch {b} produced {} parts, expected {PARTS_PER_BRANCH}",
                parts.len()
            )));
        }
        for p in parts {
            if p.len() != e {
                return Err(Error::Invalid("part vectors differ in length".into()));
            }
            data.extend_from_slice(p);
        }
    }
    let s = branch_parts.len() * PARTS_PER_BRANCH;
    Ok(EmbeddingMatrix {
        features: Tensor::from_vec(&[s, e], data).unwrap(),
    })
}
