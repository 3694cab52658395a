//! Supervised transfer: a normalized per-part metric head on top of the
//! encoder, batch-all triplet training on P x K batches, fine-tuning from
//! a pre-trained checkpoint or training from scratch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{ClipBatch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::triplet_loss;
use crate::nn::{Buffer, Mode, Module, Param, ParamGroup, SeparateFc};
use crate::optim::{MultiStepSchedule, Sgd};
use crate::silhouette::{sample_clip, GaitSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDataset {
    CasiaB,
    CasiaBStar,
    OuMvlp,
    Grew,
    Gait3d,
    Synthetic,
}

impl FromStr for TransferDataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "casiab" => Self::CasiaB,
            "casiab_star" => Self::CasiaBStar,
            "oumvlp" => Self::OuMvlp,
            "grew" => Self::Grew,
            "gait3d" => Self::Gait3d,
            "synthetic" => Self::Synthetic,
            other => {
                return Err(Error::TypeError {
                    key: "dataset".into(),
                    value: other.into(),
                    line: None,
                    reason: "expected casiab, casiab_star, oumvlp, grew, gait3d or synthetic".into(),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Subjects per batch.
    pub p: usize,
    /// Sequences per subject.
    pub k: usize,
    pub clip_len: usize,
    pub margin: f64,
    pub backbone_lr: f64,
    pub projection_lr: f64,
    pub head_lr: f64,
    /// Uniform learning rate when training from scratch.
    pub scratch_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scratch_weight_decay: f64,
    pub freeze_bn: bool,
    pub schedule: MultiStepSchedule,
    pub scratch_schedule: MultiStepSchedule,
    pub subject_fraction: f64,
    pub head_dim: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub model: EncoderConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self::preset(TransferDataset::CasiaB)
    }
}

impl TransferConfig {
    /// Batch layout and schedules for a target dataset.
    pub fn preset(dataset: TransferDataset) -> Self {
        let sched = |m: &[u64], total: u64| MultiStepSchedule {
            milestones: m.to_vec(),
            gamma: 0.1,
            total_steps: total,
        };
        let ((p, k), schedule, scratch_schedule) = match dataset {
            TransferDataset::CasiaB | TransferDataset::CasiaBStar => {
                ((8, 16), sched(&[10_000], 12_000), sched(&[10_000, 20_000, 30_000], 40_000))
            }
            TransferDataset::OuMvlp => (
                (32, 16),
                sched(&[50_000, 60_000, 70_000], 80_000),
                sched(&[60_000, 80_000, 100_000], 120_000),
            ),
            TransferDataset::Grew => (
                (128, 4),
                sched(&[50_000, 60_000, 70_000], 80_000),
                sched(&[60_000, 80_000, 100_000], 120_000),
            ),
            TransferDataset::Gait3d => (
                (64, 4),
                sched(&[6_000, 8_000, 10_000], 12_000),
                sched(&[20_000, 40_000, 50_000], 60_000),
            ),
            TransferDataset::Synthetic => ((4, 4), sched(&[300], 400), sched(&[300], 400)),
        };
        Self {
            p,
            k,
            clip_len: 30,
            margin: 0.3,
            backbone_lr: 1e-3,
            projection_lr: 1e-2,
            head_lr: 1e-1,
            scratch_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            scratch_weight_decay: 5e-4,
            freeze_bn: true,
            schedule,
            scratch_schedule,
            subject_fraction: 1.0,
            head_dim: 512,
            checkpoint_every: 0,
            seed: 0,
            model: EncoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name, value: String, range| Err(Error::ParamOutOfRange { name, value, range });
        if self.p * self.k < 2 {
            return range("finetune.p*k", format!("{}", self.p * self.k), "> 1");
        }
        if !(self.margin > 0.0) {
            return range("finetune.margin", self.margin.to_string(), "> 0");
        }
        if !(self.subject_fraction > 0.0 && self.subject_fraction <= 1.0) {
            return range("finetune.subject_frac", self.subject_fraction.to_string(), "(0, 1]");
        }
        if self.clip_len == 0 || self.head_dim == 0 {
            return range("finetune.clip_len/head_dim", format!("{}/{}", self.clip_len, self.head_dim), ">= 1");
        }
        self.schedule.validate()?;
        self.scratch_schedule.validate()?;
        self.model.validate()
    }
}

/// Per-part linear map without bias whose weight columns (one per output
/// channel) are kept at unit L2 norm. Inputs are L2-normalized per part
/// inside [`FineTuneHead::forward`].
pub struct FineTuneHead {
    pub fc: SeparateFc,
    cache: Option<(Array3<f32>, Vec<f32>)>,
}

impl FineTuneHead {
    pub fn new<R: Rng + ?Sized>(parts: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut head = Self {
            fc: SeparateFc::new("finetune.head", ParamGroup::Head, parts, in_dim, out_dim, false, rng),
            cache: None,
        };
        head.renormalize();
        head
    }

    /// Rescales every `[p, :, o]` column to unit norm.
    pub fn renormalize(&mut self) {
        let w = &mut self.fc.weight.value;
        for mut part in w.axis_iter_mut(Axis(0)) {
            for mut col in part.axis_iter_mut(Axis(1)) {
                let norm = col.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    col.mapv_inplace(|v| (v as f64 / norm) as f32);
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array3<f32>, mode: Mode) -> Array3<f32> {
        let mut unit = x.clone();
        let mut norms = Vec::with_capacity(x.len() / x.dim().2.max(1));
        for mut v in unit.lanes_mut(Axis(2)) {
            let n = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt() as f32;
            if n > 0.0 {
                v.mapv_inplace(|a| a / n);
            }
            norms.push(n);
        }
        let y = self.fc.forward(&unit, mode);
        self.cache = (mode == Mode::Train).then_some((unit, norms));
        y
    }

    /// Gradient with respect to the un-normalized input.
    pub fn backward(&mut self, dy: &Array3<f32>) -> Array3<f32> {
        let (unit, norms) = self.cache.take().expect("head backward without training forward");
        let mut g = self.fc.backward(dy);
        for ((mut gv, u), &n) in g.lanes_mut(Axis(2)).into_iter().zip(unit.lanes(Axis(2))).zip(&norms) {
            if n == 0.0 {
                gv.fill(0.0);
                continue;
            }
            let dot: f32 = gv.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            gv.zip_mut_with(&u, |a, &b| *a = (*a - dot * b) / n);
        }
        g
    }
}

impl Module for FineTuneHead {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.fc.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, _f: &mut dyn FnMut(&'a mut Buffer)) {}
}

/// Encoder (with its projection head) followed by the metric head.
pub struct FineTuneModel {
    pub encoder: Encoder,
    pub head: FineTuneHead,
}

impl FineTuneModel {
    pub fn forward(&mut self, batch: &ClipBatch, mode: Mode) -> Result<Array3<f32>> {
        let emb = self.encoder.forward(batch, mode)?;
        Ok(self.head.forward(&emb, mode))
    }

    pub fn backward(&mut self, grad: &Array3<f32>) {
        let g = self.head.backward(grad);
        self.encoder.backward(&g);
    }

    pub fn checkpoint(&mut self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "finetune",
            "encoder": self.encoder.config,
            "head_dim": self.head.fc.out_dim,
            "step": step,
        }));
        ck.add_module(&mut self.encoder);
        ck.add_module(&mut self.head);
        ck
    }
}

impl Module for FineTuneModel {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.encoder.visit_buffers(f);
    }
}

/// Encoder configuration recorded in a checkpoint's metadata.
pub fn checkpoint_encoder_config(ck: &Checkpoint) -> Result<EncoderConfig> {
    let cfg = ck
        .meta
        .get("encoder")
        .ok_or_else(|| Error::Format("checkpoint metadata has no encoder configuration".into()))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Loads the encoder (and projection) from `ck` and attaches a freshly
/// initialized metric head. Any predictor tensors in `ck` are dropped.
pub fn attach_finetune_head<R: Rng + ?Sized>(ck: &Checkpoint, head_dim: usize, rng: &mut R) -> Result<FineTuneModel> {
    let config = checkpoint_encoder_config(ck)?;
    let mut encoder = Encoder::new(&config, rng)?;
    ck.load_into(&mut encoder)?;
    let head = FineTuneHead::new(config.parts, config.embed_dim, head_dim, rng);
    Ok(FineTuneModel { encoder, head })
}

/// Subject id of every sequence; supervised phases need all of them.
fn subject_labels(seqs: &[GaitSequence]) -> Result<Vec<String>> {
    seqs.iter()
        .map(|s| s.subject_id.clone().ok_or_else(|| Error::MissingLabels(s.sequence_id.clone())))
        .collect()
}

/// Keeps the sequences of the first `ceil(fraction * S)` subjects in
/// sorted id order.
pub fn select_subject_fraction(seqs: Vec<GaitSequence>, fraction: f64) -> Result<Vec<GaitSequence>> {
    let labels = subject_labels(&seqs)?;
    let mut subjects: Vec<&String> = labels.iter().collect();
    subjects.sort();
    subjects.dedup();
    let keep = ((subjects.len() as f64 * fraction).ceil() as usize).clamp(1, subjects.len().max(1));
    let cutoff = subjects.get(keep - 1).map(|s| (*s).clone());
    Ok(seqs
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| cutoff.as_ref().is_some_and(|c| l <= c))
        .map(|(s, _)| s)
        .collect())
}

/// Identity-balanced sampler: P subjects, K sequences each. Subjects cycle
/// through shuffled epochs; sequences within a subject are drawn without
/// replacement when the subject has at least K of them.
pub struct PkSampler {
    by_subject: BTreeMap<String, Vec<usize>>,
    p: usize,
    k: usize,
    queue: Vec<String>,
}

impl PkSampler {
    pub fn new(labels: &[String], p: usize, k: usize) -> Result<Self> {
        let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_subject.entry(l.clone()).or_default().push(i);
        }
        if by_subject.is_empty() {
            return Err(Error::EmptyManifest);
        }
        Ok(Self {
            p: p.min(by_subject.len()),
            k,
            by_subject,
            queue: Vec::new(),
        })
    }

    pub fn subjects(&self) -> usize {
        self.by_subject.len()
    }

    /// Sequence indices of one batch, grouped by subject.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut chosen: Vec<String> = Vec::with_capacity(self.p);
        while chosen.len() < self.p {
            if self.queue.is_empty() {
                self.queue = self.by_subject.keys().cloned().collect();
                self.queue.shuffle(rng);
            }
            let s = self.queue.pop().expect("refilled");
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        let mut out = Vec::with_capacity(self.p * self.k);
        for s in &chosen {
            let pool = &self.by_subject[s];
            if pool.len() >= self.k {
                out.extend(pool.choose_multiple(rng, self.k).copied());
            } else {
                out.extend(pool.iter().copied());
                out.extend((pool.len()..self.k).map(|_| *pool.choose(rng).expect("non-empty")));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct TransferOutcome {
    pub model: FineTuneModel,
    pub metrics: Vec<TransferMetrics>,
}

fn train_loop(
    model: &mut FineTuneModel,
    opt: &Sgd,
    cfg: &TransferConfig,
    seqs: &[GaitSequence],
    rng: &mut ChaCha8Rng,
    out_dir: Option<&Path>,
) -> Result<Vec<TransferMetrics>> {
    let labels = subject_labels(seqs)?;
    let mut sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    log::info!(
        "training on {} sequences of {} subjects for {} steps",
        seqs.len(),
        sampler.subjects(),
        opt.schedule.total_steps
    );
    let total = opt.schedule.total_steps;
    let mut metrics = Vec::with_capacity(total as usize);
    for step in 0..total {
        let idx = sampler.next_batch(rng);
        let clips: Vec<_> = idx.iter().map(|&i| sample_clip(&seqs[i], cfg.clip_len, rng)).collect();
        let batch_labels: Vec<&String> = idx.iter().map(|&i| &labels[i]).collect();
        let batch = ClipBatch::from_clips(&clips, cfg.model.input_height, cfg.model.input_width)?;
        let emb = model.forward(&batch, Mode::Train)?;
        let (loss, grad) = triplet_loss(&emb, &batch_labels, cfg.margin)?;
        model.backward(&grad);
        let lr = opt.group_lr(ParamGroup::Head, step);
        let mut params = Vec::new();
        model.visit_params(&mut |p| params.push(p));
        opt.step(params, step);
        model.head.renormalize();
        let m = TransferMetrics { step, loss, lr };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
        }
        if step % 50 == 0 {
            log::info!("step {step} triplet {loss:.5} lr {lr}");
        }
        metrics.push(m);
        if let Some(dir) = out_dir {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
                model.checkpoint(done).save(&dir.join(format!("checkpoint-{done:06}.gsck")))?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        model.checkpoint(total).save(&dir.join("final.gsck"))?;
    }
    Ok(metrics)
}

/// Stream ids for head/encoder initialization and P×K batch drawing.
pub const INIT_STREAM: u64 = 4;
pub const DATA_STREAM: u64 = 5;

fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(INIT_STREAM);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(DATA_STREAM);
    (init, data)
}

/// Fine-tunes a pre-trained encoder: frozen batch norm, no weight decay,
/// per-group learning rates and the transfer schedule scaled by the
/// subject fraction.
pub fn finetune(
    cfg: &TransferConfig,
    pretrained: &Checkpoint,
    sequences: Vec<GaitSequence>,
    out_dir: Option<&Path>,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let seqs = select_subject_fraction(sequences, cfg.subject_fraction)?;
    let (mut init, mut data) = rngs(cfg.seed);
    let mut model = attach_finetune_head(pretrained, cfg.head_dim, &mut init)?;
    model.encoder.set_bn_frozen(cfg.freeze_bn);
    let opt = Sgd::new(cfg.head_lr, cfg.momentum, cfg.weight_decay, cfg.schedule.scaled(cfg.subject_fraction))
        .with_group_lr(ParamGroup::Backbone, cfg.backbone_lr)
        .with_group_lr(ParamGroup::Projection, cfg.projection_lr)
        .with_group_lr(ParamGroup::Head, cfg.head_lr);
    let cfg = TransferConfig {
        model: model.encoder.config.clone(),
        ..cfg.clone()
    };
    let metrics = train_loop(&mut model, &opt, &cfg, &seqs, &mut data, out_dir)?;
    Ok(TransferOutcome { model, metrics })
}

/// Same pipeline from random weights: uniform learning rate, trainable
/// batch norm and the scratch schedule.
pub fn train_from_scratch(cfg: &TransferConfig, sequences: Vec<GaitSequence>, out_dir: Option<&Path>) -> Result<TransferOutcome> {
    cfg.validate()?;
    let seqs = select_subject_fraction(sequences, cfg.subject_fraction)?;
    let (mut init, mut data) = rngs(cfg.seed);
    let encoder = Encoder::new(&cfg.model, &mut init)?;
    let head = FineTuneHead::new(cfg.model.parts, cfg.model.embed_dim, cfg.head_dim, &mut init);
    let mut model = FineTuneModel { encoder, head };
    let opt = Sgd::new(
        cfg.scratch_lr,
        cfg.momentum,
        cfg.scratch_weight_decay,
        cfg.scratch_schedule.scaled(cfg.subject_fraction),
    );
    let metrics = train_loop(&mut model, &opt, cfg, &seqs, &mut data, out_dir)?;
    Ok(TransferOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params_of;
    use crate::synthetic::{build_corpus, Condition, CorpusSpec};

    fn small_model() -> EncoderConfig {
        EncoderConfig {
            stem_channels: 4,
            block_channels: [4, 4, 8, 8],
            embed_dim: 8,
            ..EncoderConfig::default()
        }
    }

    fn toy_cfg(steps: u64) -> TransferConfig {
        TransferConfig {
            p: 2,
            k: 2,
            clip_len: 4,
            head_dim: 6,
            schedule: MultiStepSchedule::new(vec![], 0.1, steps).unwrap(),
            scratch_schedule: MultiStepSchedule::new(vec![], 0.1, steps).unwrap(),
            model: small_model(),
            ..TransferConfig::preset(TransferDataset::Synthetic)
        }
    }

    fn corpus(ids: usize) -> Vec<GaitSequence> {
        build_corpus(&CorpusSpec::new(ids, vec![90.0], &[Condition::Nm], 2, 8, 3)).unwrap().1
    }

    fn pretrained(cfg: &EncoderConfig) -> Checkpoint {
        let mut enc = Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "pretrain", "encoder": cfg, "step": 0}));
        ck.add_module(&mut enc);
        ck
    }

    #[test]
    fn table_presets() {
        let g3d = TransferConfig::preset(TransferDataset::Gait3d);
        assert_eq!((g3d.p, g3d.k), (64, 4));
        assert_eq!(g3d.scratch_schedule.milestones, vec![20_000, 40_000, 50_000]);
        assert_eq!(g3d.scratch_schedule.total_steps, 60_000);
        let ou = TransferConfig::preset(TransferDataset::OuMvlp);
        assert_eq!((ou.p, ou.k, ou.schedule.total_steps), (32, 16, 80_000));
        let cb = TransferConfig::preset(TransferDataset::CasiaB);
        assert_eq!((cb.p, cb.k, cb.clip_len), (8, 16, 30));
        assert_eq!(cb.schedule.milestones, vec![10_000]);
        assert_eq!((cb.margin, cb.weight_decay), (0.3, 0.0));
        assert_eq!(TransferConfig::preset(TransferDataset::Grew).p, 128);
        assert_eq!("casiab_star".parse::<TransferDataset>().unwrap(), TransferDataset::CasiaBStar);
        assert!("casia".parse::<TransferDataset>().is_err());
        assert!(TransferConfig { p: 1, k: 1, ..toy_cfg(1) }.validate().is_err());
        assert!(TransferConfig { margin: 0.0, ..toy_cfg(1) }.validate().is_err());
    }

    #[test]
    fn head_sees_unit_features_and_keeps_unit_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = FineTuneHead::new(2, 5, 3, &mut rng);
        let x = Array3::from_shape_fn((4, 2, 5), |(i, p, d)| (i + 2 * p + d) as f32 - 3.0);
        let y = head.forward(&x, Mode::Train);
        assert_eq!(y.dim(), (4, 2, 3));
        let (unit, _) = head.cache.as_ref().unwrap();
        for v in unit.lanes(Axis(2)) {
            assert!((v.iter().map(|a| a * a).sum::<f32>() - 1.0).abs() < 1e-5);
        }
        head.backward(&Array3::ones(y.dim()));
        let opt = Sgd::new(0.5, 0.9, 0.0, MultiStepSchedule::new(vec![], 0.1, 10).unwrap());
        opt.step(params_of(&mut head), 0);
        head.renormalize();
        for part in head.fc.weight.value.axis_iter(Axis(0)) {
            for col in part.axis_iter(Axis(1)) {
                let n = col.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = FineTuneHead::new(1, 4, 3, &mut rng);
        let x = Array3::from_shape_fn((2, 1, 4), |(i, _, d)| 0.3 * d as f32 - 0.5 * i as f32 + 0.2);
        let w = Array3::from_shape_fn((2, 1, 3), |(i, _, d)| 1.0 + i as f32 - 0.7 * d as f32);
        let f = |head: &mut FineTuneHead, x: &Array3<f32>| (head.forward(x, Mode::Eval) * &w).sum() as f64;
        head.forward(&x, Mode::Train);
        let g = head.backward(&w);
        let eps = 1e-3f32;
        for idx in [(0, 0, 0), (0, 0, 3), (1, 0, 1)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += eps;
            xm[idx] -= eps;
            let fd = (f(&mut head, &xp) - f(&mut head, &xm)) / (2.0 * eps as f64);
            assert!((fd - g[idx] as f64).abs() < 1e-3, "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn subject_fraction_takes_first_sorted_subjects() {
        let seqs = corpus(10);
        let kept = select_subject_fraction(seqs.clone(), 0.2).unwrap();
        let mut subjects: Vec<_> = kept.iter().map(|s| s.subject_id.clone().unwrap()).collect();
        subjects.dedup();
        assert_eq!(subjects, vec!["001", "002"]);
        assert_eq!(kept.len(), 4);
        assert_eq!(select_subject_fraction(seqs.clone(), 0.15).unwrap().len(), 4);
        let mut unlabeled = seqs;
        unlabeled[3].subject_id = None;
        assert!(matches!(select_subject_fraction(unlabeled, 1.0), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn pk_batches_are_balanced() {
        let labels: Vec<String> = (0..12).map(|i| format!("s{}", i % 4)).collect();
        let mut s = PkSampler::new(&labels, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = s.next_batch(&mut rng);
            assert_eq!(b.len(), 6);
            for chunk in b.chunks(2) {
                assert_eq!(labels[chunk[0]], labels[chunk[1]]);
                assert_ne!(chunk[0], chunk[1]);
            }
            let mut subj: Vec<_> = b.chunks(2).map(|c| &labels[c[0]]).collect();
            subj.dedup();
            assert_eq!(subj.len(), 3);
        }
    }

    #[test]
    fn finetune_freezes_batch_norm_and_sets_group_rates() {
        let cfg = toy_cfg(3);
        let ck = pretrained(&cfg.model);
        let mut before = Encoder::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ck.load_into(&mut before).unwrap();
        let out = finetune(&cfg, &ck, corpus(4), None).unwrap();
        let mut model = out.model;
        let mut bufs_a = Vec::new();
        before.visit_buffers(&mut |b| bufs_a.push(b.value.clone()));
        let mut bufs_b = Vec::new();
        model.encoder.visit_buffers(&mut |b| bufs_b.push(b.value.clone()));
        assert_eq!(bufs_a, bufs_b);
        let gamma_before = before.backbone.stem_bn.gamma.value.clone();
        assert_eq!(model.encoder.backbone.stem_bn.gamma.value, gamma_before);
        let conv_before = before.backbone.stem.weight.value.clone();
        assert_ne!(model.encoder.backbone.stem.weight.value, conv_before);
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.metrics[0].lr, 0.1);
        let saved = model.checkpoint(3);
        assert!(saved.has_prefix("finetune.head") && !saved.has_prefix("predictor"));
    }

    #[test]
    fn scratch_run_changes_weights_and_is_reproducible() {
        let cfg = toy_cfg(4);
        let dir = tempfile::tempdir().unwrap();
        let a = train_from_scratch(&cfg, corpus(4), Some(dir.path())).unwrap();
        let b = train_from_scratch(&cfg, corpus(4), None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let (mut ma, mut mb) = (a.model, b.model);
        assert_eq!(ma.checkpoint(4).to_bytes().unwrap(), mb.checkpoint(4).to_bytes().unwrap());
        let fresh = Encoder::new(&cfg.model, &mut rngs(cfg.seed).0).unwrap();
        let w0 = fresh.backbone.stem.weight.value.clone();
        assert_ne!(ma.encoder.backbone.stem.weight.value, w0);
        assert!(dir.path().join("final.gsck").exists());
        assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(), 4);
    }

    #[test]
    fn single_subject_batch_is_degenerate() {
        let cfg = TransferConfig { subject_fraction: 0.25, ..toy_cfg(1) };
        assert!(matches!(train_from_scratch(&cfg, corpus(4), None), Err(Error::DegenerateBatch)));
    }
}
