//! Losses, sampling, augmentation, optimizer, schedule and the training loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod sampler;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hod::{descriptors_from_frames, DescriptorSet};
use crate::pagcn::{apply_bn_updates, Ctx, Mode, Network, NetworkConfig};
use crate::tensor::Tensor;

pub use optim::{Adam, AdamConfig};
pub use sampler::{sample_batch, SampledClip, TrainSet};
pub use schedule::OneCycle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch.
    pub batch_p: usize,
    /// Sequences per identity.
    pub batch_k: usize,
    /// Frames drawn per sequence.
    pub seq_len: usize,
    pub margin: f64,
    /// Weight of the cross-entropy term.
    pub gamma: f64,
    pub iterations: u64,
    pub schedule: OneCycle,
    pub flip_prob: f64,
    pub noise_prob: f64,
    /// Noise standard deviation in unified units.
    pub noise_sigma: f64,
    pub log_every: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    fn paper(batch_p: usize, batch_k: usize, iterations: u64) -> Self {
        Self {
            batch_p,
            batch_k,
            seq_len: 30,
            margin: 0.2,
            gamma: 1.0,
            iterations,
            schedule: OneCycle::default(),
            flip_prob: 0.01,
            noise_prob: 0.3,
            noise_sigma: 2.0,
            log_every: 100,
            checkpoint_every: 5000,
        }
    }

    pub fn casiab() -> Self {
        Self::paper(4, 32, 40_000)
    }

    pub fn gait3d() -> Self {
        Self::paper(32, 4, 60_000)
    }

    pub fn oumvlp() -> Self {
        Self::paper(32, 16, 150_000)
    }

    pub fn grew() -> Self {
        Self::paper(32, 8, 150_000)
    }

    pub fn toy() -> Self {
        Self {
            seq_len: 24,
            log_every: 10,
            checkpoint_every: 0,
            ..Self::paper(8, 4, 200)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad("batch_p and batch_k must be at least 2");
        }
        if self.seq_len == 0 || self.iterations == 0 {
            return bad("seq_len and iterations must be positive");
        }
        for p in [self.flip_prob, self.noise_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.noise_sigma < 0.0 || self.margin < 0.0 || self.gamma < 0.0 {
            return bad("noise_sigma, margin and gamma must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean over slots.
    pub triplet: f64,
    /// Mean over slots.
    pub cross_entropy: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "iteration={} lr={:.6e} loss={:.6} triplet={:.6} cross_entropy={:.6}",
            self.iteration, self.lr, self.loss, self.triplet, self.cross_entropy
        )
    }
}

/// Parameters, optimizer state and iteration counter of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub adam: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    /// Iterations completed.
    pub iteration: u64,
}

/// Descriptors of augmented clips.
pub fn prepare_clips(clips: &mut [SampledClip], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<DescriptorSet> {
    clips
        .iter_mut()
        .map(|c| {
            augment::augment_flip(&mut c.frames, config.flip_prob, rng);
            augment::augment_noise(&mut c.frames, config.noise_prob, config.noise_sigma, rng);
            descriptors_from_frames(&c.frames, "clip")
        })
        .collect()
}

impl Trainer {
    pub fn new(net_config: NetworkConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = Network::new(net_config)?;
        let adam = Adam::new(&net.store, AdamConfig::default());
        Ok(Self {
            net,
            adam,
            config,
            seed,
            iteration: 0,
        })
    }

    /// Random stream of one iteration; independent of earlier iterations so
    /// that a resumed run samples the same batches.
    fn rng_for(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        rng
    }

    /// Combined loss and per-parameter gradients on a prepared batch,
    /// without updating anything.
    pub fn loss_and_grads(
        &self,
        batch: &[DescriptorSet],
        labels: &[usize],
    ) -> Result<(StepMetrics, Vec<Option<Tensor>>, Vec<crate::pagcn::layers::BnUpdate>)> {
        loss::check_labels(labels, self.net.config.num_classes)?;
        let inputs = self.net.batch_inputs(batch)?;
        let mut ctx = Ctx::new(&self.net.store, Mode::Train, true);
        let out = self.net.forward(&mut ctx, &inputs)?;
        let lv = loss::combined_loss_on_tape(
            &mut ctx.tape,
            out.metric,
            out.logits,
            labels,
            self.config.margin,
            self.config.gamma,
        );
        let total = ctx.value(lv.total).item();
        let mean = |v| {
            let t: &Tensor = ctx.value(v);
            t.sum() / t.len() as f64
        };
        let metrics = StepMetrics {
            iteration: self.iteration,
            lr: 0.0,
            loss: total,
            triplet: mean(lv.triplet),
            cross_entropy: mean(lv.cross_entropy),
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iteration)));
        }
        let grads = ctx.tape.backward(lv.total);
        let pg = ctx.param_grads(&grads);
        Ok((metrics, pg, std::mem::take(&mut ctx.bn_updates)))
    }

    /// One sample → augment → forward → backward → update iteration.
    pub fn step(&mut self, set: &TrainSet) -> Result<StepMetrics> {
        let it = self.iteration;
        let lr = self.config.schedule.lr(it, self.config.iterations)?;
        let mut rng = self.rng_for(it);
        let c = &self.config;
        let mut clips = sample_batch(set, c.batch_p, c.batch_k, c.seq_len, &mut rng)?;
        let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        let batch = prepare_clips(&mut clips, &self.config, &mut rng);
        let (mut metrics, grads, updates) = self.loss_and_grads(&batch, &labels)?;
        self.adam.step(&mut self.net.store, &grads, lr)?;
        apply_bn_updates(&mut self.net.store, &updates);
        metrics.lr = lr;
        self.iteration += 1;
        Ok(metrics)
    }

    pub fn to_checkpoint(&self, config_echo: &str) -> Checkpoint {
        let mut tensors = self.net.store.named();
        for (i, e) in self.net.store.entries().iter().enumerate() {
            if e.trainable {
                tensors.push((format!("adam.m.{}", e.name), self.adam.m[i].clone()));
                tensors.push((format!("adam.v.{}", e.name), self.adam.v[i].clone()));
            }
        }
        Checkpoint {
            config: config_echo.to_string(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            tensors,
        }
    }

    /// Restore parameters and optimizer state from a checkpoint.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.net.store.load_named(&ckpt.tensors)?;
        for (i, e) in self.net.store.entries().iter().enumerate() {
            if !e.trainable {
                continue;
            }
            for (prefix, slot) in [("adam.m.", &mut self.adam.m[i]), ("adam.v.", &mut self.adam.v[i])] {
                let name = format!("{prefix}{}", e.name);
                let t = ckpt
                    .tensor(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Shape {
                        name,
                        expected: slot.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                *slot = t.clone();
            }
        }
        self.adam.step = ckpt.adam_step;
        self.iteration = ckpt.iteration;
        Ok(())
    }
}

/// Where a training run writes its outputs.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.gpgw"),
            metrics: dir.join("metrics.log"),
        }
    }
}

/// Run the remaining iterations, logging and checkpointing along the way.
/// On failure the last checkpoint written stays in place.
pub fn train_loop(
    trainer: &mut Trainer,
    set: &TrainSet,
    paths: &RunPaths,
    config_echo: &str,
) -> Result<Vec<StepMetrics>> {
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    let mut history = Vec::new();
    let total = trainer.config.iterations;
    while trainer.iteration < total {
        let m = trainer.step(set)?;
        let done = trainer.iteration;
        if done % trainer.config.log_every == 0 || done == total {
            log::info!("{}", m.log_line());
            writeln!(log, "{}", m.log_line()).map_err(|e| Error::io(&paths.metrics, e))?;
        }
        let every = trainer.config.checkpoint_every;
        if every > 0 && done % every == 0 && done != total {
            trainer.to_checkpoint(config_echo).write(&paths.checkpoint)?;
        }
        history.push(m);
    }
    trainer.to_checkpoint(config_echo).write(&paths.checkpoint)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_paper_batches() {
        assert_eq!((TrainConfig::gait3d().batch_p, TrainConfig::gait3d().batch_k), (32, 4));
        assert_eq!(TrainConfig::oumvlp().iterations, 150_000);
        assert_eq!((TrainConfig::grew().batch_p, TrainConfig::grew().batch_k), (32, 8));
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::toy();
        c.batch_k = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy();
        c.noise_prob = 1.5;
        assert!(c.validate().is_err());
        assert!(TrainConfig::toy().validate().is_ok());
    }
}
