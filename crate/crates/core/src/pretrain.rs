//! Self-supervised pre-training: disjoint clip pairs, spatial augmentation,
//! siamese encoding with a predictor and a symmetrized contrastive loss.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_sao_spatial, SpatialAugConfig};
use crate::checkpoint::Checkpoint;
use crate::encoder::{ClipBatch, Encoder, EncoderConfig, Predictor};
use crate::error::{Error, Result};
use crate::loss::{cosine_batch_loss, embedding_std, symmetrized_batch_loss, TauMode};
use crate::nn::{Mode, Module, Param};
use crate::optim::{MultiStepSchedule, Sgd};
use crate::silhouette::{sample_clip, sample_disjoint_clip_pair, GaitSequence};
use crate::view::{BiasedSampler, SamplerConfig, SequenceViewStats};

/// ChaCha stream ids derived from the run seed: weight initialization,
/// batch drawing and augmentation, and the corpus subset shuffle.
pub const INIT_STREAM: u64 = 1;
pub const DATA_STREAM: u64 = 2;
pub const SUBSET_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub clip_len: usize,
    pub tau: f64,
    pub tau_mode: TauMode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: MultiStepSchedule,
    /// Spatial augmentation of each clip.
    pub spatial: bool,
    /// Two disjoint clips of one sequence; otherwise one clip seen twice.
    pub intra_seq: bool,
    /// View-variance biased sequence sampling; otherwise uniform.
    pub sampling: bool,
    /// In-batch negatives (InfoNCE); otherwise the cosine-similarity loss.
    pub negatives: bool,
    pub subset_frac: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub model: EncoderConfig,
    pub aug: SpatialAugConfig,
    pub sampler: SamplerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            clip_len: 16,
            tau: 16.0,
            tau_mode: TauMode::Divide,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: MultiStepSchedule {
                milestones: vec![80_000, 120_000],
                gamma: 0.1,
                total_steps: 150_000,
            },
            spatial: true,
            intra_seq: true,
            sampling: true,
            negatives: true,
            subset_frac: 1.0,
            checkpoint_every: 10_000,
            seed: 0,
            model: EncoderConfig::default(),
            aug: SpatialAugConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &'static str, value: String, range: &'static str| Error::ParamOutOfRange { name, value, range };
        if !(self.tau > 0.0) {
            return Err(range("pretrain.tau", self.tau.to_string(), "> 0"));
        }
        if self.batch_size < 2 {
            return Err(range("pretrain.batch_size", self.batch_size.to_string(), ">= 2"));
        }
        if self.clip_len == 0 {
            return Err(range("pretrain.clip_len", "0".into(), ">= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(range("pretrain.lr", self.lr.to_string(), "> 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(range("pretrain.momentum", self.momentum.to_string(), "[0, 1)"));
        }
        if !(self.subset_frac > 0.0 && self.subset_frac <= 1.0) {
            return Err(range("pretrain.subset_frac", self.subset_frac.to_string(), "(0, 1]"));
        }
        self.schedule.validate()?;
        self.model.validate()?;
        self.aug.validate()?;
        self.sampler.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub emb_std: f64,
}

pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub optimizer: Sgd,
    pub rng: ChaCha8Rng,
    pub last: Option<StepMetrics>,
}

impl TrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(INIT_STREAM);
        let encoder = Encoder::new(&cfg.model, &mut init)?;
        let predictor = Predictor::new(cfg.model.parts, cfg.model.embed_dim, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            step: 0,
            lr: cfg.lr,
            encoder,
            predictor,
            optimizer: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.schedule.clone()),
            rng,
            last: None,
        })
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.encoder.visit_params(&mut |p| out.push(p));
        self.predictor.visit_params(&mut |p| out.push(p));
        out
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "pretrain",
            "encoder": self.encoder.config,
            "step": self.step,
        }));
        ck.add_module(&mut self.encoder);
        ck.add_module(&mut self.predictor);
        ck
    }
}

/// Training sequences plus the sequence sampler.
pub struct PretrainData {
    pub sequences: HashMap<String, GaitSequence>,
    pub sampler: BiasedSampler,
}

impl PretrainData {
    /// Applies the subset fraction and builds the sampler. Sampling needs a
    /// view-statistics table.
    pub fn new(
        sequences: Vec<GaitSequence>,
        stats: Option<&HashMap<String, SequenceViewStats>>,
        cfg: &PretrainConfig,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut ids: Vec<String> = sequences.iter().map(|s| s.sequence_id.clone()).collect();
        ids.sort();
        if cfg.subset_frac < 1.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SUBSET_STREAM);
            ids.shuffle(&mut rng);
            ids.truncate(((ids.len() as f64 * cfg.subset_frac).ceil() as usize).max(1));
            ids.sort();
        }
        let sampler = if cfg.sampling {
            let stats = stats.ok_or_else(|| {
                Error::ConfigConflict("sampling augmentation is enabled but no view-statistics table was given".into())
            })?;
            BiasedSampler::new(&ids, stats, &cfg.sampler)?
        } else {
            BiasedSampler::uniform(&ids)?
        };
        let keep: HashSet<&String> = ids.iter().collect();
        let sequences = sequences.into_iter().filter(|s| keep.contains(&s.sequence_id)).map(|s| (s.sequence_id.clone(), s)).collect();
        Ok(Self { sequences, sampler })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Draws `n` sequence ids, avoiding repeats within the batch when the
/// corpus is large enough.
fn draw_batch(data: &PretrainData, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let unique_possible = n <= data.len();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let id = data.sampler.next(rng).to_string();
        attempts += 1;
        if unique_possible && seen.contains(&id) && attempts < 100 * n {
            continue;
        }
        seen.insert(id.clone());
        out.push(id);
    }
    out
}

/// One optimization step on a freshly sampled batch.
pub fn pretrain_step(state: &mut TrainState, data: &PretrainData, cfg: &PretrainConfig) -> Result<StepMetrics> {
    let ids = draw_batch(data, cfg.batch_size, &mut state.rng);
    let mut clips_a = Vec::with_capacity(ids.len());
    let mut clips_b = Vec::with_capacity(ids.len());
    for id in &ids {
        let seq = &data.sequences[id];
        let (mut a, mut b) = if cfg.intra_seq {
            sample_disjoint_clip_pair(seq, cfg.clip_len, &mut state.rng)
        } else {
            let c = sample_clip(seq, cfg.clip_len, &mut state.rng);
            (c.clone(), c)
        };
        if cfg.spatial {
            a = apply_sao_spatial(&a, &cfg.aug, &mut state.rng).0;
            b = apply_sao_spatial(&b, &cfg.aug, &mut state.rng).0;
        }
        clips_a.push(a);
        clips_b.push(b);
    }
    let n = ids.len();
    let batch = ClipBatch::from_clips(clips_a.iter().chain(&clips_b), cfg.model.input_height, cfg.model.input_width)?;
    let k = state.encoder.forward(&batch, Mode::Train)?;
    let q = state.predictor.forward(&k, Mode::Train);
    let split = |x: &Array3<f32>| (x.slice(s![..n, .., ..]).to_owned(), x.slice(s![n.., .., ..]).to_owned());
    let (k_a, k_b) = split(&k);
    let (q_a, q_b) = split(&q);
    let out = if cfg.negatives {
        symmetrized_batch_loss(&q_a, &q_b, &k_a, &k_b, cfg.tau, cfg.tau_mode)?
    } else {
        cosine_batch_loss(&q_a, &q_b, &k_a, &k_b)?
    };
    let grad_q = concatenate(Axis(0), &[out.grad_qa.view(), out.grad_qb.view()]).expect("same part layout");
    // Keys are constants: the encoder only sees the gradient that flows
    // back through the predictor.
    let grad_k = state.predictor.backward(&grad_q);
    state.encoder.backward(&grad_k);
    let step = state.step;
    let lr = state.optimizer.group_lr(crate::nn::ParamGroup::Backbone, step);
    let opt = state.optimizer.clone();
    opt.step(state.params(), step);
    state.step += 1;
    state.lr = state.optimizer.group_lr(crate::nn::ParamGroup::Backbone, state.step);
    let metrics = StepMetrics {
        step,
        loss: out.loss,
        lr,
        emb_std: embedding_std(&k),
    };
    state.last = Some(metrics);
    Ok(metrics)
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Runs the full schedule. With `out_dir` set, appends the metrics log
/// (`metrics.jsonl`) and writes `checkpoint-<step>.gsck` every
/// `checkpoint_every` steps plus `final.gsck`.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    sequences: Vec<GaitSequence>,
    stats: Option<&HashMap<String, SequenceViewStats>>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = PretrainData::new(sequences, stats, cfg)?;
    let mut state = TrainState::new(cfg)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    log::info!(
        "pre-training on {} sequences for {} steps (batch {}, clip {})",
        data.len(),
        cfg.schedule.total_steps,
        cfg.batch_size,
        cfg.clip_len
    );
    let mut metrics = Vec::with_capacity(cfg.schedule.total_steps as usize);
    while state.step < cfg.schedule.total_steps {
        let m = pretrain_step(&mut state, &data, cfg)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
        }
        if m.step % 50 == 0 {
            log::info!("step {} loss {:.5} lr {} emb_std {:.5}", m.step, m.loss, m.lr, m.emb_std);
        }
        metrics.push(m);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.schedule.total_steps {
                state.checkpoint().save(&dir.join(format!("checkpoint-{:06}.gsck", state.step)))?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        state.checkpoint().save(&dir.join("final.gsck"))?;
    }
    Ok(PretrainOutcome { state, metrics })
}
