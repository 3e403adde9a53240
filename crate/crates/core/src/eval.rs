//! Embedding extraction, distances and rank-1 protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{Metric, RunConfig};
use crate::error::{Error, Result};
use crate::graph::SchemeName;
use crate::hod::{build_descriptors, DescriptorSet};
use crate::hot::{normalize_sequence, HotConfig, Normalization, UnifiedPoseSequence};
use crate::pagcn::{pagcn_block, Ctx, EmbeddingMatrix, Mode, Network};
use crate::pose_io::{write_atomic, Condition, LabeledSequence, Protocol, Role, NUM_JOINTS};
use crate::tensor::Tensor;

/// Rebuild the network stored in a checkpoint.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Network)> {
    let cfg = RunConfig::from_toml(&ckpt.config, None)?;
    let mut net = Network::new(cfg.network.clone())?;
    net.store.load_named(&ckpt.tensors)?;
    Ok((cfg, net))
}

/// Inference-mode embedding of one full sequence.
pub fn embed_descriptors(net: &Network, d: &DescriptorSet) -> Result<EmbeddingMatrix> {
    Ok(net.embed(std::slice::from_ref(d))?.remove(0))
}

/// Embed every sequence on its full length; parallel over sequences.
pub fn embed_dataset(net: &Network, seqs: &[UnifiedPoseSequence]) -> Result<Vec<EmbeddingMatrix>> {
    seqs.par_iter()
        .map(|s| {
            if s.is_empty() {
                return Err(Error::EmptySequence(s.seq_id.clone()));
            }
            embed_descriptors(net, &build_descriptors(s))
        })
        .collect()
}

/// Probe × gallery distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na * nb)).max(0.0)
            }
        }
    }
}

/// Distances between the concatenated slot features.
pub fn pairwise_distances(
    probe: &[EmbeddingMatrix],
    gallery: &[EmbeddingMatrix],
    metric: Metric,
) -> Result<DistanceMatrix> {
    let shape = probe.first().or(gallery.first()).map(|e| e.features.shape().to_vec());
    if let Some(shape) = &shape {
        if let Some(bad) = probe.iter().chain(gallery).find(|e| e.features.shape() != &shape[..]) {
            return Err(Error::Shape {
                name: "embedding".into(),
                expected: shape.clone(),
                actual: bad.features.shape().to_vec(),
            });
        }
    }
    let data: Vec<f64> = probe
        .par_iter()
        .flat_map_iter(|p| gallery.iter().map(move |g| distance(p.flat(), g.flat(), metric)))
        .collect();
    Ok(DistanceMatrix {
        rows: probe.len(),
        cols: gallery.len(),
        data,
    })
}

/// Index of the nearest gallery column among `cols`, lowest index on ties.
fn nearest(dist: &DistanceMatrix, row: usize, cols: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in cols {
        if best.is_none_or(|b| dist.get(row, c) < dist.get(row, b)) {
            best = Some(c);
        }
    }
    best
}

/// Fraction of probes whose nearest gallery entry has their label.
pub fn rank1_simple<L: PartialEq>(dist: &DistanceMatrix, probe: &[L], gallery: &[L]) -> Result<f64> {
    if dist.cols == 0 || gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if dist.rows != probe.len() || dist.cols != gallery.len() {
        return Err(Error::Protocol("label counts do not match the distance matrix".into()));
    }
    if probe.is_empty() {
        return Err(Error::Protocol("empty probe set".into()));
    }
    let cols: Vec<usize> = (0..dist.cols).collect();
    let hits = (0..dist.rows)
        .filter(|&r| nearest(dist, r, &cols).is_some_and(|c| gallery[c] == probe[r]))
        .count();
    Ok(hits as f64 / dist.rows as f64)
}

/// Identity, view and condition of one evaluated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub seq_id: String,
    pub subject: String,
    pub view: String,
    pub condition: Condition,
}

impl EvalItem {
    pub fn of(s: &UnifiedPoseSequence) -> Self {
        Self {
            seq_id: s.seq_id.clone(),
            subject: s.subject.clone(),
            view: s.view.clone(),
            condition: s.condition,
        }
    }

    /// Sequence number from ids of the form `{subject}-{condition}-{nn}-{view}`.
    pub fn sequence_number(&self) -> Option<u32> {
        let parts: Vec<&str> = self.seq_id.rsplitn(3, '-').collect();
        parts.get(1)?.parse().ok()
    }
}

/// CASIA-B roles: NM#1-4 gallery; NM#5-6, BG#1-2, CL#1-2 probe.
pub fn casiab_role(item: &EvalItem) -> Option<Role> {
    let n = item.sequence_number()?;
    match (item.condition, n) {
        (Condition::NM, 1..=4) => Some(Role::Gallery),
        (Condition::NM, 5..=6) | (Condition::BG, 1..=2) | (Condition::CL, 1..=2) => Some(Role::Probe),
        _ => None,
    }
}

/// OU-MVLP roles: sequence #01 gallery, #00 probe.
pub fn oumvlp_role(item: &EvalItem) -> Option<Role> {
    match item.sequence_number()? {
        1 => Some(Role::Gallery),
        0 => Some(Role::Probe),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub condition: String,
    pub probe_view: String,
    pub gallery_view: String,
    pub accuracy: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSummary {
    pub condition: String,
    /// Equal-weight mean over the condition's cells.
    pub mean: f64,
    pub cells: usize,
}

/// Result of a protocol run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub protocol: String,
    pub cells: Vec<CellResult>,
    pub conditions: Vec<ConditionSummary>,
    /// Mean of the condition means, or the single rank-1 of a simple protocol.
    pub mean: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("protocol\t{}\n", self.protocol);
        for w in &self.warnings {
            let _ = writeln!(out, "warning\t{w}");
        }
        for c in &self.cells {
            let _ = writeln!(
                out,
                "cell\tcondition={}\tprobe_view={}\tgallery_view={}\tprobes={}\taccuracy={:.6}",
                c.condition, c.probe_view, c.gallery_view, c.probes, c.accuracy
            );
        }
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "summary\tcondition={}\tcells={}\tmean={:.6}",
                c.condition, c.cells, c.mean
            );
        }
        let _ = writeln!(out, "summary\tmean={:.6}", self.mean);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// The (probe view, gallery view) cells averaged for a view set: every
/// ordered pair of distinct views.
pub fn cross_view_cells(views: &BTreeSet<String>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for p in views {
        for g in views {
            if p != g {
                out.push((p.clone(), g.clone()));
            }
        }
    }
    out
}

/// Cross-view rank-1 excluding identical views. `probe_groups` maps a
/// condition name to probe indices; cells are weighted equally within a
/// condition, and conditions equally in the overall mean.
pub fn rank1_cross_view(
    protocol: &str,
    dist: &DistanceMatrix,
    probe: &[EvalItem],
    gallery: &[EvalItem],
    probe_groups: &BTreeMap<String, Vec<usize>>,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let views: BTreeSet<String> = probe.iter().chain(gallery).map(|i| i.view.clone()).collect();
    let mut by_view: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, g) in gallery.iter().enumerate() {
        by_view.entry(&g.view).or_default().push(j);
    }
    let mut report = EvalReport {
        protocol: protocol.to_string(),
        ..EvalReport::default()
    };
    for (cond, idx) in probe_groups {
        let mut accs = Vec::new();
        for (pv, gv) in cross_view_cells(&views) {
            let rows: Vec<usize> = idx.iter().copied().filter(|&r| probe[r].view == pv).collect();
            let Some(cols) = by_view.get(gv.as_str()) else {
                report.warnings.push(format!(
                    "condition {cond}: no gallery sequences at view {gv}; cell {pv}->{gv} skipped"
                ));
                continue;
            };
            if rows.is_empty() {
                report.warnings.push(format!(
                    "condition {cond}: no probes at view {pv}; cell {pv}->{gv} skipped"
                ));
                continue;
            }
            let hits = rows
                .iter()
                .filter(|&&r| nearest(dist, r, cols).is_some_and(|c| gallery[c].subject == probe[r].subject))
                .count();
            let accuracy = hits as f64 / rows.len() as f64;
            accs.push(accuracy);
            report.cells.push(CellResult {
                condition: cond.clone(),
                probe_view: pv,
                gallery_view: gv,
                accuracy,
                probes: rows.len(),
            });
        }
        if accs.is_empty() {
            report.warnings.push(format!("condition {cond}: no evaluable cells"));
            continue;
        }
        report.conditions.push(ConditionSummary {
            condition: cond.clone(),
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            cells: accs.len(),
        });
    }
    if report.conditions.is_empty() {
        return Err(Error::Protocol("no evaluable cross-view cells".into()));
    }
    report.mean = report.conditions.iter().map(|c| c.mean).sum::<f64>() / report.conditions.len() as f64;
    Ok(report)
}

/// CASIA-B protocol over embedded sequences; roles come from condition and
/// sequence number, and sequences outside the protocol are ignored.
pub fn rank1_casiab(items: &[EvalItem], embeddings: &[EmbeddingMatrix], metric: Metric) -> Result<EvalReport> {
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (i, it) in items.iter().enumerate() {
        match casiab_role(it) {
            Some(Role::Gallery) => gallery.push(i),
            Some(Role::Probe) => probe.push(i),
            _ => {}
        }
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (r, &i) in probe.iter().enumerate() {
        groups.entry(items[i].condition.to_string()).or_default().push(r);
    }
    cross_view_subset("casiab", items, embeddings, &probe, &gallery, &groups, metric)
}

fn cross_view_subset(
    name: &str,
    items: &[EvalItem],
    embeddings: &[EmbeddingMatrix],
    probe: &[usize],
    gallery: &[usize],
    groups: &BTreeMap<String, Vec<usize>>,
    metric: Metric,
) -> Result<EvalReport> {
    let pe: Vec<EmbeddingMatrix> = probe.iter().map(|&i| embeddings[i].clone()).collect();
    let ge: Vec<EmbeddingMatrix> = gallery.iter().map(|&i| embeddings[i].clone()).collect();
    let dist = pairwise_distances(&pe, &ge, metric)?;
    let pi: Vec<EvalItem> = probe.iter().map(|&i| items[i].clone()).collect();
    let gi: Vec<EvalItem> = gallery.iter().map(|&i| items[i].clone()).collect();
    rank1_cross_view(name, &dist, &pi, &gi, groups)
}

fn simple_report(
    name: &str,
    items: &[EvalItem],
    embeddings: &[EmbeddingMatrix],
    probe: &[usize],
    gallery: &[usize],
    metric: Metric,
) -> Result<EvalReport> {
    let pe: Vec<EmbeddingMatrix> = probe.iter().map(|&i| embeddings[i].clone()).collect();
    let ge: Vec<EmbeddingMatrix> = gallery.iter().map(|&i| embeddings[i].clone()).collect();
    let dist = pairwise_distances(&pe, &ge, metric)?;
    let pl: Vec<&str> = probe.iter().map(|&i| items[i].subject.as_str()).collect();
    let gl: Vec<&str> = gallery.iter().map(|&i| items[i].subject.as_str()).collect();
    let acc = rank1_simple(&dist, &pl, &gl)?;
    Ok(EvalReport {
        protocol: name.to_string(),
        cells: vec![],
        conditions: vec![],
        mean: acc,
        warnings: vec![],
    })
}

fn check_per_subject(items: &[EvalItem], idx: &[usize], expected: usize, role: &str) -> Result<()> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in idx {
        *counts.entry(items[i].subject.as_str()).or_default() += 1;
    }
    if let Some((s, n)) = counts.iter().find(|(_, &n)| n != expected) {
        return Err(Error::Protocol(format!(
            "subject {s} has {n} {role} sequences, protocol requires {expected}"
        )));
    }
    Ok(())
}

/// Run `protocol` on embedded sequences with their manifest roles.
pub fn evaluate_protocol(
    protocol: Protocol,
    items: &[EvalItem],
    roles: &[Role],
    embeddings: &[EmbeddingMatrix],
    metric: Metric,
) -> Result<EvalReport> {
    let pick = |r: Role| -> Vec<usize> { (0..items.len()).filter(|&i| roles[i] == r).collect() };
    match protocol {
        Protocol::Casiab => rank1_casiab(items, embeddings, metric),
        Protocol::Oumvlp => {
            let gallery: Vec<usize> = (0..items.len())
                .filter(|&i| oumvlp_role(&items[i]) == Some(Role::Gallery))
                .collect();
            let probe: Vec<usize> = (0..items.len())
                .filter(|&i| oumvlp_role(&items[i]) == Some(Role::Probe))
                .collect();
            let groups = BTreeMap::from([("all".to_string(), (0..probe.len()).collect())]);
            cross_view_subset("oumvlp", items, embeddings, &probe, &gallery, &groups, metric)
        }
        Protocol::Gait3d => {
            let probe = pick(Role::Probe);
            check_per_subject(items, &probe, 1, "probe")?;
            simple_report("gait3d", items, embeddings, &probe, &pick(Role::Gallery), metric)
        }
        Protocol::Grew => {
            let (probe, gallery) = (pick(Role::Probe), pick(Role::Gallery));
            check_per_subject(items, &probe, 2, "probe")?;
            check_per_subject(items, &gallery, 2, "gallery")?;
            simple_report("grew", items, embeddings, &probe, &gallery, metric)
        }
        Protocol::Simple => simple_report(
            "simple",
            items,
            embeddings,
            &pick(Role::Probe),
            &pick(Role::Gallery),
            metric,
        ),
    }
}

/// Normalize, embed and score every non-training sequence.
pub fn evaluate_sequences(
    net: &Network,
    seqs: &[LabeledSequence],
    protocol: Protocol,
    normalization: Normalization,
    hot: &HotConfig,
    metric: Metric,
) -> Result<EvalReport> {
    let kept: Vec<&LabeledSequence> = seqs.iter().filter(|s| s.role != Role::Train).collect();
    let unified: Vec<UnifiedPoseSequence> = kept
        .par_iter()
        .map(|s| normalize_sequence(&s.sequence, normalization, hot))
        .collect::<Result<_>>()?;
    let embeddings = embed_dataset(net, &unified)?;
    let items: Vec<EvalItem> = unified.iter().map(EvalItem::of).collect();
    let roles: Vec<Role> = kept.iter().map(|s| s.role).collect();
    evaluate_protocol(protocol, &items, &roles, &embeddings, metric)
}

/// Evaluate a checkpoint on a (possibly different) target dataset; the
/// classifier heads are unused.
pub fn cross_domain_eval(ckpt: &Checkpoint, target: &[LabeledSequence], protocol: Protocol) -> Result<EvalReport> {
    let (cfg, net) = network_from_checkpoint(ckpt)?;
    evaluate_sequences(&net, target, protocol, cfg.normalization, &cfg.hot, cfg.data.metric)
}

/// Per-keypoint features `[17, C]` (mean over time) at the output of the
/// parts5 stage of branch `branch`. With `masked` false the same parameters
/// run with all-ones masks.
pub fn keypoint_heatmap(net: &Network, d: &DescriptorSet, branch: usize, masked: bool) -> Result<Tensor> {
    let br = net
        .branches
        .get(branch)
        .ok_or_else(|| Error::Invalid(format!("no branch {branch}")))?;
    let inputs = net.batch_inputs(std::slice::from_ref(d))?;
    let mut ctx = Ctx::new(&net.store, Mode::Eval, false);
    let mut x = ctx.tape.constant(inputs[branch].clone());
    let fixed = &net.graph.subsets.normalized;
    for block in br.blocks.iter().filter(|b| b.scheme == SchemeName::Parts5) {
        let mask = if masked {
            net.mask_for(block.scheme)
        } else {
            net.graph.mask(SchemeName::Global)
        };
        x = pagcn_block(&mut ctx, x, block, fixed, mask);
    }
    let f = ctx.value(x);
    let (t, c) = (f.shape()[1], f.shape()[3]);
    let mut out = Tensor::zeros(&[NUM_JOINTS, c]);
    for ti in 0..t {
        for v in 0..NUM_JOINTS {
            for ch in 0..c {
                let cur = out.at(&[v, ch]);
                out.set(&[v, ch], cur + f.at(&[0, ti, v, ch]) / t as f64);
            }
        }
    }
    Ok(out)
}

/// Comma-separated matrix, one row per keypoint.
pub fn heatmap_to_csv(m: &Tensor) -> String {
    let c = m.shape()[1];
    let mut out = String::new();
    for v in 0..m.shape()[0] {
        let row: Vec<String> = (0..c).map(|ch| format!("{:.9e}", m.at(&[v, ch]))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn heatmap_dump(net: &Network, d: &DescriptorSet, branch: usize, masked: bool, path: &Path) -> Result<Tensor> {
    let m = keypoint_heatmap(net, d, branch, masked)?;
    write_atomic(path, heatmap_to_csv(&m).as_bytes())?;
    Ok(m)
}
