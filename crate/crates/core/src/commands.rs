//! Command implementations behind the `gpgait` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{cross_domain_eval, heatmap_dump, network_from_checkpoint, EvalReport};
use crate::hod::build_descriptors;
use crate::hot::normalize_sequence;
use crate::pose_io::{
    load_sequences, read_sequence_file, validate_sequence, write_atomic, DatasetManifest, Protocol, ValidationRules,
};
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{train_loop, RunPaths, StepMetrics, TrainSet, Trainer};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub sequences: usize,
    pub dropped_sequences: usize,
    pub dropped_frames: usize,
}

/// Normalize and describe every sequence of a manifest. Writes
/// `unified.jsonl`, `descriptors.tsv` and `report.tsv` into `out`.
pub fn cmd_preprocess(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<PreprocessSummary> {
    let m = DatasetManifest::read(manifest)?;
    let seqs = load_sequences(&m)?;
    create_dir(out)?;
    let rules = ValidationRules {
        min_extent: cfg.hot.epsilon_extent,
        ..ValidationRules::default()
    };
    let results: Vec<_> = seqs
        .par_iter()
        .map(|s| {
            let report = validate_sequence(&s.sequence, &rules);
            let unified = normalize_sequence(&s.sequence, cfg.normalization, &cfg.hot);
            (report, unified)
        })
        .collect();

    let mut unified_text = String::new();
    let mut desc_text = String::from("seq_id\tframes\tjoint\tbone\tangle\n");
    let mut report_text = String::from("seq_id\tframes\tkept\tdropped_frames\tstatus\n");
    let mut summary = PreprocessSummary {
        sequences: seqs.len(),
        dropped_sequences: 0,
        dropped_frames: 0,
    };
    for (s, (report, unified)) in seqs.iter().zip(results) {
        let total = s.sequence.frames.len();
        match unified {
            Ok(u) => {
                let dropped: Vec<String> = (0..total)
                    .filter(|t| u.kept_frame_indices.binary_search(t).is_err())
                    .map(|t| t.to_string())
                    .collect();
                summary.dropped_frames += dropped.len();
                let status = if report.is_clean() { "ok" } else { "flagged" };
                let _ = writeln!(
                    report_text,
                    "{}\t{total}\t{}\t{}\t{status}",
                    u.seq_id,
                    u.len(),
                    if dropped.is_empty() {
                        "-".into()
                    } else {
                        dropped.join(",")
                    }
                );
                let d = build_descriptors(&u);
                let _ = writeln!(
                    desc_text,
                    "{}\t{}\t{}\t{}\t{}",
                    u.seq_id,
                    d.frames(),
                    join_floats(d.joint.data()),
                    join_floats(d.bone.data()),
                    join_floats(d.angle.data())
                );
                unified_text.push_str(&u.to_record());
                unified_text.push('\n');
            }
            Err(e @ (Error::EmptySequence(_) | Error::NonFinite(_) | Error::DegenerateSpine(_))) => {
                summary.dropped_sequences += 1;
                summary.dropped_frames += total;
                let _ = writeln!(report_text, "{}\t{total}\t0\tall\tdropped: {e}", s.sequence.seq_id);
            }
            Err(e) => return Err(e),
        }
    }
    write_atomic(&out.join("unified.jsonl"), unified_text.as_bytes())?;
    write_atomic(&out.join("descriptors.tsv"), desc_text.as_bytes())?;
    write_atomic(&out.join("report.tsv"), report_text.as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    pub last: Option<StepMetrics>,
}

/// Load the training split of a manifest as unified sequences.
pub fn load_train_set(manifest: &Path, cfg: &RunConfig) -> Result<TrainSet> {
    let m = DatasetManifest::read(manifest)?;
    let seqs = load_sequences(&m)?;
    let unified = seqs
        .par_iter()
        .filter(|s| cfg.data.train_roles.contains(&s.role))
        .map(|s| normalize_sequence(&s.sequence, cfg.normalization, &cfg.hot))
        .collect::<Result<Vec<_>>>()?;
    if unified.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: no sequences with roles {:?}",
            manifest.display(),
            cfg.data.train_roles
        )));
    }
    Ok(TrainSet::new(unified))
}

/// Train on `manifest`, writing `checkpoint.gpgw` and `metrics.log` to `out`.
/// With `resume`, parameters, optimizer state and the iteration counter are
/// restored from that checkpoint first.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let set = load_train_set(manifest, cfg)?;
    let mut cfg = cfg.clone();
    let classes = set.num_classes();
    if cfg.network.num_classes == 0 {
        cfg.network.num_classes = classes;
    } else if cfg.network.num_classes != classes {
        return Err(Error::Config(format!(
            "network.num_classes is {} but the training set has {classes} identities",
            cfg.network.num_classes
        )));
    }
    create_dir(out)?;
    let mut trainer = Trainer::new(cfg.network.clone(), cfg.train.clone(), cfg.seed)?;
    if let Some(path) = resume {
        let ckpt = Checkpoint::read(path)?;
        let saved = RunConfig::from_toml(&ckpt.config, None)?;
        if saved.network != cfg.network {
            return Err(Error::Config(format!(
                "{}: network configuration differs from the current one",
                path.display()
            )));
        }
        trainer.restore(&ckpt)?;
        log::info!("resuming at iteration {}", trainer.iteration);
    }
    let paths = RunPaths::in_dir(out);
    let history = train_loop(&mut trainer, &set, &paths, &cfg.to_toml())?;
    Ok(TrainSummary {
        checkpoint: paths.checkpoint,
        iterations: trainer.iteration,
        last: history.last().copied(),
    })
}

/// Evaluate a checkpoint on a manifest and write the results file.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, protocol: Option<Protocol>, out: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let m = DatasetManifest::read(manifest)?;
    let seqs = load_sequences(&m)?;
    let report = cross_domain_eval(&ckpt, &seqs, protocol.unwrap_or(m.protocol))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write(out)?;
    Ok(report)
}

/// Dump the keypoint heatmap of the first sequence in `sequence_file`.
/// With `compare_unmasked`, writes `<stem>.masked.csv` and
/// `<stem>.unmasked.csv` next to `out` instead.
pub fn cmd_inspect(
    checkpoint: &Path,
    sequence_file: &Path,
    out: &Path,
    branch: usize,
    compare_unmasked: bool,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let (cfg, net) = network_from_checkpoint(&ckpt)?;
    let seq = read_sequence_file(sequence_file)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: no sequences", sequence_file.display())))?;
    let u = normalize_sequence(&seq, cfg.normalization, &cfg.hot)?;
    let d = build_descriptors(&u);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if !compare_unmasked {
        heatmap_dump(&net, &d, branch, true, out)?;
        return Ok(vec![out.to_path_buf()]);
    }
    let stem = out.with_extension("");
    let masked = PathBuf::from(format!("{}.masked.csv", stem.display()));
    let unmasked = PathBuf::from(format!("{}.unmasked.csv", stem.display()));
    heatmap_dump(&net, &d, branch, true, &masked)?;
    heatmap_dump(&net, &d, branch, false, &unmasked)?;
    Ok(vec![masked, unmasked])
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(cfg, out)
}
