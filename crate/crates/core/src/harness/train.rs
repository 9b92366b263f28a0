//! The training loop: multi-view batches, the joint objective, SGD with
//! momentum and weight decay, per-epoch evaluation, metrics and checkpoints.
//!
//! Everything runs on one thread in a fixed order, so two runs with the same
//! config and seed produce bitwise-identical loss traces, and resuming from
//! `last.apnet` continues the trace exactly.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointHeader};
use super::config::{ExperimentConfig, Schedule};
use super::data::{Dataset, Sample};
use super::evaluate::{evaluate, Accuracy};
use super::model::{ModelAccount, Network};
use crate::augment::{make_view_batch, Image, PolicySpec};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::objective::{cross_pathway_similarity, total_loss, LossBreakdown};
use crate::tape::{Graph, Tensor};

/// Mixed into the run seed for the epoch-order and augmentation streams.
const TRAIN_STREAM_TAG: u64 = 0x7472_6169_6e00_0000;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAST_CHECKPOINT: &str = "last.apnet";
pub const BEST_CHECKPOINT: &str = "best.apnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean cross-entropy of each head over the epoch.
    pub head_losses: Vec<f64>,
    pub s: f64,
    pub lambda_s: f64,
    pub total: f64,
    pub lr: f64,
    pub top1: f64,
    pub top5: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(flatten)]
    pub account: ModelAccount,
    pub final_top1: f64,
    pub final_top5: f64,
    pub best_top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Overrides `cfg.epochs`.
    pub epochs: Option<usize>,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub net: Network,
    graded: Vec<PolicySpec>,
    momentum: Vec<Tensor>,
    pub seed: u64,
    pub epoch: usize,
    pub global_step: u64,
    pub best_top1: f64,
    total_steps: u64,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, train_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.model()?, seed)?;
        let momentum = net
            .state()
            .params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.raw_dim()))
            .collect();
        Ok(Self {
            graded: cfg.graded()?,
            total_steps: (steps_per_epoch(train_len, cfg.optim.batch_size) * cfg.epochs) as u64,
            cfg: cfg.clone(),
            net,
            momentum,
            seed,
            epoch: 0,
            global_step: 0,
            best_top1: 0.0,
        })
    }

    pub fn resume(cfg: &ExperimentConfig, train_len: usize, path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        if ck.header.model != cfg.model()? {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model",
                path.display()
            )));
        }
        let mut t = Self::new(cfg, train_len, ck.header.seed)?;
        t.net = ck.network;
        t.momentum = ck
            .momentum
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimiser state".into()))?;
        t.epoch = ck.header.epoch;
        t.global_step = ck.header.global_step;
        t.best_top1 = ck.header.best_top1;
        Ok(t)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.net.spec(),
            epoch: self.epoch,
            seed: self.seed,
            global_step: self.global_step,
            best_top1: self.best_top1,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.net, Some(&self.momentum))
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.cfg.optim.lr;
        match self.cfg.optim.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step.min(self.total_steps) as f64 / self.total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// One optimisation step on `images`; returns the loss breakdown.
    pub fn step(&mut self, images: &[Image], labels: &[usize], view_seed: u64) -> Result<LossBreakdown> {
        let batch = make_view_batch(images, labels, &self.graded, &self.cfg.augment.light, view_seed)?;
        let views = (0..batch.levels())
            .map(|j| batch.level_tensor(j))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::train();
        let out = self.net.forward_train(&mut g, &views, &mut ctx)?;
        let s = cross_pathway_similarity(&mut g, &out.features)?;
        let (loss, breakdown) = total_loss(&mut g, &out.logits, labels, s, &self.cfg.optim.loss)?;
        let grads = g.backward(loss)?.param_grads(&g);
        let lr = self.lr_at(self.global_step);
        let (mu, wd) = (self.cfg.optim.momentum, self.cfg.optim.loss.weight_decay);
        let mut grad_of: Vec<Option<Tensor>> = vec![None; self.momentum.len()];
        for (id, gr) in grads {
            grad_of[id.0] = Some(gr);
        }
        let state = self.net.state_mut();
        let ids: Vec<_> = state.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let w = state.params.value_mut(id);
            let v = &mut self.momentum[id.0];
            let gr = grad_of[id.0].take();
            ndarray::Zip::from(&mut *v)
                .and(&*w)
                .for_each(|v, &w| *v = mu * *v + wd * w);
            if let Some(gr) = gr {
                *v += &gr;
            }
            w.scaled_add(-lr, v);
        }
        ctx.commit(&mut state.norms);
        self.global_step += 1;
        Ok(breakdown)
    }

    /// One pass over `train` in a seeded order; the epoch's RNG depends only on
    /// `(seed, epoch)`.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<EpochLosses> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ TRAIN_STREAM_TAG);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let bs = self.cfg.optim.batch_size;
        let mut acc = EpochLosses::new(self.net.k());
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Image> = chunk.iter().map(|&i| train[i].image.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let view_seed: u64 = rng.random();
            let lr = self.lr_at(self.global_step);
            let bd = self.step(&images, &labels, view_seed).map_err(|e| match e {
                Error::NonFinite { component, value } => Error::NonFinite {
                    component: format!("{component} at epoch {} batch {b}", self.epoch + 1),
                    value,
                },
                e => e,
            })?;
            acc.add(&bd, lr);
        }
        self.epoch += 1;
        Ok(acc)
    }
}

pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    let full = train_len / batch_size;
    full + (train_len % batch_size >= 2) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLosses {
    pub head_losses: Vec<f64>,
    pub s: f64,
    pub lambda_s: f64,
    pub total: f64,
    pub lr: f64,
    pub batches: usize,
}

impl EpochLosses {
    fn new(k: usize) -> Self {
        Self {
            head_losses: vec![0.0; k],
            s: 0.0,
            lambda_s: 0.0,
            total: 0.0,
            lr: 0.0,
            batches: 0,
        }
    }

    fn add(&mut self, b: &LossBreakdown, lr: f64) {
        for (a, l) in self.head_losses.iter_mut().zip(&b.head_losses) {
            *a += l;
        }
        self.s += b.s;
        self.lambda_s += b.lambda * b.s;
        self.total += b.total;
        self.lr = lr;
        self.batches += 1;
    }

    /// Per-batch means.
    pub fn mean(&self) -> Self {
        let n = self.batches.max(1) as f64;
        Self {
            head_losses: self.head_losses.iter().map(|l| l / n).collect(),
            s: self.s / n,
            lambda_s: self.lambda_s / n,
            total: self.total / n,
            lr: self.lr,
            batches: self.batches,
        }
    }
}

/// Reads a metrics log, one record per line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Trains one seed of `cfg` on `data`, writing metrics, checkpoints and a
/// summary under `opts.out_dir`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, opts: &TrainOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    if data.classes != cfg.model()?.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.classes,
            cfg.model()?.num_classes()
        )));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let last = opts.out_dir.join(LAST_CHECKPOINT);
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut trainer = if opts.resume && last.exists() {
        let t = Trainer::resume(&cfg, data.train.len(), &last)?;
        if t.seed != opts.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from requested seed {}",
                t.seed, opts.seed
            )));
        }
        // Drop records written after the checkpoint was taken.
        let kept: Vec<_> = if metrics_path.exists() {
            read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.epoch <= t.epoch)
                .collect()
        } else {
            Vec::new()
        };
        fs::write(&metrics_path, "")?;
        for r in &kept {
            append_metrics(&metrics_path, r)?;
        }
        t
    } else {
        fs::write(&metrics_path, "")?;
        Trainer::new(&cfg, data.train.len(), opts.seed)?
    };
    fs::write(opts.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut last_acc = None;
    let start = Instant::now();
    while trainer.epoch < cfg.epochs {
        let losses = trainer.train_epoch(&data.train)?.mean();
        let acc: Accuracy = evaluate(&trainer.net, &data.val, &cfg.eval)?;
        let rec = MetricsRecord {
            epoch: trainer.epoch,
            head_losses: losses.head_losses,
            s: losses.s,
            lambda_s: losses.lambda_s,
            total: losses.total,
            lr: losses.lr,
            top1: acc.top1,
            top5: acc.top5,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{} loss {:.4} top1 {:.2} top5 {:.2}",
            rec.epoch,
            cfg.epochs,
            rec.total,
            rec.top1,
            rec.top5
        );
        append_metrics(&metrics_path, &rec)?;
        let improved = acc.top1 > trainer.best_top1 || trainer.epoch == 1;
        if improved {
            trainer.best_top1 = trainer.best_top1.max(acc.top1);
        }
        trainer.save(&last)?;
        if improved {
            checkpoint::save(
                &opts.out_dir.join(BEST_CHECKPOINT),
                &trainer.header(),
                &trainer.net,
                None,
            )?;
        }
        last_acc = Some(acc);
    }
    let final_acc = match last_acc {
        Some(a) => a,
        None => evaluate(&trainer.net, &data.val, &cfg.eval)?,
    };
    let summary = RunSummary {
        name: cfg.name.clone(),
        seed: trainer.seed,
        epochs: trainer.epoch,
        account: cfg.model()?.account((cfg.eval.crop, cfg.eval.crop))?,
        final_top1: final_acc.top1,
        final_top5: final_acc.top5,
        best_top1: trainer.best_top1,
    };
    write_json_atomic(&opts.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
