//! View classifier, per-sequence view statistics and the view-variance
//! biased sequence sampler.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, BatchNorm, Buffer, Linear, Mode, Module, Param, ParamGroup};
use crate::optim::{MultiStepSchedule, Sgd};
use crate::silhouette::{Clip, GaitSequence, FRAME_HEIGHT, FRAME_WIDTH};

pub const VIEW_CLASSES: usize = 7;
pub const VIEW_INPUT_DIM: usize = FRAME_HEIGHT * FRAME_WIDTH;
const HIDDEN: [usize; 4] = [1024, 512, 256, 128];

/// Merged view class of an angle: 0/180 → 0, 15/195 → 1, ..., 90/270 → 6.
/// Only the fourteen 15-degree angles in `[0, 90] ∪ [180, 270]` are valid.
pub fn view_class(angle_deg: f64) -> Result<usize> {
    let a = angle_deg.rem_euclid(360.0);
    let folded = if a >= 180.0 { a - 180.0 } else { a };
    let k = folded / 15.0;
    if (k - k.round()).abs() > 1e-9 || k.round() > 6.0 {
        return Err(Error::UnknownView(angle_deg.to_string()));
    }
    Ok(k.round() as usize)
}

/// Temporal average of the clip's frames, flattened row-major.
pub fn build_view_input(clip: &Clip) -> Result<Vec<f32>> {
    if clip.is_empty() {
        return Err(Error::EmptySet("build_view_input"));
    }
    let (h, w) = (clip.frames[0].height(), clip.frames[0].width());
    if (h, w) != (FRAME_HEIGHT, FRAME_WIDTH) {
        return Err(Error::ShapeMismatch {
            expected: format!("{FRAME_HEIGHT}x{FRAME_WIDTH}"),
            actual: format!("{h}x{w}"),
        });
    }
    let mut acc = vec![0.0f32; h * w];
    for f in &clip.frames {
        for (a, &p) in acc.iter_mut().zip(f.pixels()) {
            *a += p as f32;
        }
    }
    let n = clip.len() as f32;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Non-overlapping windows of `window` frames; a trailing remainder shorter
/// than the window is dropped unless it is the only window.
pub fn view_clips(seq: &GaitSequence, window: usize) -> Vec<Clip> {
    let n = seq.len();
    let count = (n / window).max(1);
    (0..count)
        .map(|i| {
            let idx: Vec<usize> = if n < window { (0..n).collect() } else { (i * window..(i + 1) * window).collect() };
            Clip {
                source_id: seq.sequence_id.clone(),
                frames: idx.iter().map(|&t| seq.frames()[t].clone()).collect(),
                frame_indices: idx,
            }
        })
        .collect()
}

/// Four hidden fully-connected layers with batch norm and ReLU, then a
/// linear layer over the seven merged view classes.
pub struct ViewClassifier {
    pub hidden: Vec<(Linear, BatchNorm)>,
    pub out: Linear,
    masks: Vec<Vec<bool>>,
}

impl ViewClassifier {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let g = ParamGroup::Classifier;
        let mut hidden = Vec::new();
        let mut prev = VIEW_INPUT_DIM;
        for (i, &h) in HIDDEN.iter().enumerate() {
            hidden.push((
                Linear::new(&format!("view.fc{i}"), g, prev, h, rng),
                BatchNorm::new(&format!("view.bn{i}"), g, h),
            ));
            prev = h;
        }
        Self {
            hidden,
            out: Linear::new("view.out", g, prev, VIEW_CLASSES, rng),
            masks: Vec::new(),
        }
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "view" }));
        ck.add_module(self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if kind != "view" {
            return Err(Error::Format(format!("expected a view classifier checkpoint, found kind `{kind}`")));
        }
        let mut model = Self::new(&mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into(&mut model)?;
        Ok(model)
    }

    /// Class logits `[N, 7]`.
    pub fn forward(&mut self, x: &Array2<f32>, mode: Mode) -> Array2<f32> {
        self.masks.clear();
        let mut h = x.clone();
        for (fc, bn) in &mut self.hidden {
            h = fc.forward(&h, mode);
            let n = h.nrows();
            let data = h.as_slice_mut().expect("contiguous");
            bn.forward_slice(data, n, 1, mode);
            let mask = relu_inplace(data);
            if mode == Mode::Train {
                self.masks.push(mask);
            }
        }
        self.out.forward(&h, mode)
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>) {
        let mut g = self.out.backward(dlogits);
        for (fc, bn) in self.hidden.iter_mut().rev() {
            let mask = self.masks.pop().expect("classifier backward without forward");
            let n = g.nrows();
            let data = g.as_slice_mut().expect("contiguous");
            relu_backward(data, &mask);
            bn.backward_slice(data, n, 1);
            g = fc.backward(&g);
        }
    }

    pub fn predict_proba(&mut self, x: &Array2<f32>) -> Array2<f32> {
        let mut p = self.forward(x, Mode::Eval);
        for mut row in p.rows_mut() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        p
    }

    pub fn predict(&mut self, inputs: &[Vec<f32>]) -> Vec<usize> {
        let x = stack(inputs);
        self.forward(&x, Mode::Eval)
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect()
    }
}

impl Module for ViewClassifier {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for (fc, bn) in &mut self.hidden {
            fc.visit_params(f);
            bn.visit_params(f);
        }
        self.out.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        for (_, bn) in &mut self.hidden {
            bn.visit_buffers(f);
        }
    }
}

fn stack(rows: &[Vec<f32>]) -> Array2<f32> {
    let d = rows.first().map_or(VIEW_INPUT_DIM, |r| r.len());
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).expect("equal-length rows")
}

/// Mean cross-entropy against targets smoothed as `(1-eps) one_hot + eps/K`,
/// with its gradient with respect to the logits.
pub fn smoothed_cross_entropy(logits: &Array2<f32>, targets: &[usize], eps: f64) -> (f64, Array2<f32>) {
    let (n, k) = logits.dim();
    let mut grad = Array2::<f32>::zeros((n, k));
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let m = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        for (c, &v) in row.iter().enumerate() {
            let y = eps / k as f64 + if c == targets[i] { 1.0 - eps } else { 0.0 };
            let logp = v as f64 - lse;
            loss -= y * logp;
            grad[[i, c]] = ((logp.exp() - y) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ViewTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

/// Trains on `(input, class)` pairs; returns the model and its training-set
/// accuracy.
pub fn train_view_classifier(examples: &[(Vec<f32>, usize)], cfg: &ViewTrainConfig) -> Result<(ViewClassifier, f64)> {
    for c in 0..VIEW_CLASSES {
        if !examples.iter().any(|(_, y)| *y == c) {
            return Err(Error::MissingClass(c));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ViewClassifier::new(&mut rng);
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches_per_epoch).max(1) as u64;
    let schedule = MultiStepSchedule::new(vec![total * 2 / 3], 0.1, total + 1)?;
    let opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, schedule);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // A single-sample batch has no batch statistics to learn from.
            if chunk.len() < 2 {
                continue;
            }
            let x = stack(&chunk.iter().map(|&i| examples[i].0.clone()).collect::<Vec<_>>());
            let y: Vec<usize> = chunk.iter().map(|&i| examples[i].1).collect();
            let logits = model.forward(&x, Mode::Train);
            let (_, grad) = smoothed_cross_entropy(&logits, &y, cfg.label_smoothing);
            model.backward(&grad);
            let mut params = Vec::new();
            model.visit_params(&mut |p| params.push(p));
            opt.step(params, step);
            step += 1;
        }
    }
    let inputs: Vec<Vec<f32>> = examples.iter().map(|(x, _)| x.clone()).collect();
    let pred = model.predict(&inputs);
    let acc = pred.iter().zip(examples).filter(|(p, (_, y))| *p == y).count() as f64 / examples.len() as f64;
    Ok((model, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceViewStats {
    pub v_bar: f64,
    pub sigma_sq: f64,
    pub m: usize,
}

/// Sample mean and `(m-1)`-normalized variance of predicted view classes.
pub fn sequence_view_stats(views: &[usize]) -> Result<SequenceViewStats> {
    if views.is_empty() {
        return Err(Error::EmptySet("predicted views"));
    }
    let m = views.len();
    let v_bar = views.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
    let sigma_sq = if m < 2 {
        0.0
    } else {
        views.iter().map(|&v| (v as f64 - v_bar).powi(2)).sum::<f64>() / (m - 1) as f64
    };
    Ok(SequenceViewStats { v_bar, sigma_sq, m })
}

/// Predicts a view per 16-frame window and summarizes the sequence.
pub fn classify_sequence(model: &mut ViewClassifier, seq: &GaitSequence, window: usize) -> Result<SequenceViewStats> {
    let inputs = view_clips(seq, window).iter().map(build_view_input).collect::<Result<Vec<_>>>()?;
    sequence_view_stats(&model.predict(&inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub dumb_prob: f64,
    pub dumb_threshold: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            dumb_prob: 0.1,
            dumb_threshold: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dumb_prob) {
            return Err(Error::ParamOutOfRange {
                name: "sampler.dumb_prob",
                value: self.dumb_prob.to_string(),
                range: "[0, 1]",
            });
        }
        Ok(())
    }
}

/// A sequence is dumb when its view variance does not exceed the threshold
/// (zero variance included).
pub fn is_dumb(stats: &SequenceViewStats, cfg: &SamplerConfig) -> bool {
    stats.sigma_sq <= cfg.dumb_threshold
}

/// Draws sequence ids: the dumb pool with probability `dumb_prob`, then
/// uniformly within the chosen pool.
#[derive(Clone, Debug)]
pub struct BiasedSampler {
    dumb: Vec<String>,
    lively: Vec<String>,
    dumb_prob: f64,
}

impl BiasedSampler {
    pub fn new(ids: &[String], stats: &HashMap<String, SequenceViewStats>, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        if ids.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let (mut dumb, mut lively) = (Vec::new(), Vec::new());
        for id in ids {
            let s = stats.get(id).ok_or_else(|| Error::MissingMetadata {
                id: id.clone(),
                field: "view stats",
            })?;
            if is_dumb(s, cfg) {
                dumb.push(id.clone());
            } else {
                lively.push(id.clone());
            }
        }
        Ok(Self {
            dumb,
            lively,
            dumb_prob: cfg.dumb_prob,
        })
    }

    /// Every id equally likely.
    pub fn uniform(ids: &[String]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyManifest);
        }
        Ok(Self {
            dumb: Vec::new(),
            lively: ids.to_vec(),
            dumb_prob: 0.0,
        })
    }

    pub fn pool_sizes(&self) -> (usize, usize) {
        (self.dumb.len(), self.lively.len())
    }

    pub fn is_dumb_id(&self, id: &str) -> bool {
        self.dumb.iter().any(|d| d == id)
    }

    pub fn next<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let pool = if self.lively.is_empty() {
            &self.dumb
        } else if self.dumb.is_empty() {
            &self.lively
        } else if rng.random_bool(self.dumb_prob) {
            &self.dumb
        } else {
            &self.lively
        };
        &pool[rng.random_range(0..pool.len())]
    }
}

pub fn write_stats_table(path: &Path, stats: &BTreeMap<String, SequenceViewStats>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (id, s) in stats {
        writeln!(f, "{id}\t{}\t{}\t{}", s.v_bar, s.sigma_sq, s.m)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_stats_table(path: &Path) -> Result<HashMap<String, SequenceViewStats>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Format(format!("{}:{}: {reason}", path.display(), i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        let v_bar = cols[1].parse().map_err(|_| bad("v_bar"))?;
        let sigma_sq = cols[2].parse().map_err(|_| bad("sigma_sq"))?;
        let m = cols[3].parse().map_err(|_| bad("m"))?;
        out.insert(cols[0].to_string(), SequenceViewStats { v_bar, sigma_sq, m });
    }
    Ok(out)
}

/// Reads `sequence_id<TAB>angle` view labels.
pub fn read_view_labels(path: &Path) -> Result<HashMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, angle) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected `id<TAB>angle`", path.display(), i + 1)))?;
        let angle = crate::silhouette::parse_view_degrees(angle)
            .ok_or_else(|| Error::UnknownView(angle.to_string()))?;
        out.insert(id.to_string(), angle);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silhouette::SilhouetteFrame;

    #[test]
    fn merged_labels_are_symmetric() {
        for k in 0..7 {
            let a = 15.0 * k as f64;
            assert_eq!(view_class(a).unwrap(), k);
            assert_eq!(view_class(a + 180.0).unwrap(), k);
        }
        assert!(view_class(105.0).is_err());
        assert!(view_class(10.0).is_err());
    }

    #[test]
    fn view_input_is_the_temporal_mean() {
        let on = SilhouetteFrame::from_fn(64, 44, |r, c| r == 3 && c == 4);
        let off = SilhouetteFrame::zeros(64, 44);
        let clip = Clip {
            source_id: "x".into(),
            frames: vec![on.clone(), off],
            frame_indices: vec![0, 1],
        };
        let v = build_view_input(&clip).unwrap();
        assert_eq!(v.len(), 2816);
        assert_eq!(v[3 * 44 + 4], 0.5);
        let same = Clip {
            source_id: "x".into(),
            frames: vec![on.clone(), on.clone()],
            frame_indices: vec![0, 1],
        };
        assert!(build_view_input(&same).unwrap().iter().zip(on.pixels()).all(|(a, &b)| *a == b as f32));
    }

    #[test]
    fn smoothed_loss_cases() {
        let uniform = Array2::<f32>::zeros((3, 7));
        for eps in [0.0, 0.1] {
            let (l, _) = smoothed_cross_entropy(&uniform, &[0, 3, 6], eps);
            assert!((l - 7f64.ln()).abs() < 1e-9);
        }
        let mut sharp = Array2::<f32>::from_elem((1, 7), -60.0);
        sharp[[0, 2]] = 60.0;
        assert!(smoothed_cross_entropy(&sharp, &[2], 0.0).0 < 1e-12);
    }

    #[test]
    fn stats_examples() {
        let s = sequence_view_stats(&[3, 3, 3]).unwrap();
        assert_eq!((s.v_bar, s.sigma_sq), (3.0, 0.0));
        let s = sequence_view_stats(&[0, 2]).unwrap();
        assert_eq!((s.v_bar, s.sigma_sq), (1.0, 2.0));
        let s = sequence_view_stats(&[0, 1, 2]).unwrap();
        assert_eq!((s.v_bar, s.sigma_sq), (1.0, 1.0));
        assert_eq!(sequence_view_stats(&[4]).unwrap().sigma_sq, 0.0);
        let cfg = SamplerConfig::default();
        let st = |v| SequenceViewStats { v_bar: 0.0, sigma_sq: v, m: 3 };
        assert!(is_dumb(&st(0.5), &cfg) && is_dumb(&st(0.0), &cfg) && !is_dumb(&st(2.0), &cfg));
    }

    #[test]
    fn sampler_pool_frequencies() {
        let ids: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let mut stats = HashMap::new();
        stats.insert("A".to_string(), SequenceViewStats { v_bar: 0.0, sigma_sq: 0.0, m: 2 });
        stats.insert("B".to_string(), SequenceViewStats { v_bar: 0.0, sigma_sq: 4.0, m: 2 });
        let s = BiasedSampler::new(&ids, &stats, &SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let a = (0..n).filter(|_| s.next(&mut rng) == "A").count() as f64 / n as f64;
        assert!((a - 0.1).abs() < 0.01, "{a}");
        stats.get_mut("B").unwrap().sigma_sq = 0.0;
        let all_dumb = BiasedSampler::new(&ids, &stats, &SamplerConfig::default()).unwrap();
        let a = (0..n).filter(|_| all_dumb.next(&mut rng) == "A").count() as f64 / n as f64;
        assert!((a - 0.5).abs() < 0.01);
        assert!(matches!(BiasedSampler::new(&[], &stats, &SamplerConfig::default()), Err(Error::EmptyManifest)));
    }

    #[test]
    fn stats_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.tsv");
        let mut table = BTreeMap::new();
        table.insert("s1".to_string(), SequenceViewStats { v_bar: 1.5, sigma_sq: 0.25, m: 4 });
        write_stats_table(&path, &table).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "s1\t1.5\t0.25\t4\n");
        assert_eq!(read_stats_table(&path).unwrap()["s1"], table["s1"]);
    }

    #[test]
    fn missing_class_is_reported() {
        let ex: Vec<(Vec<f32>, usize)> = (0..6).map(|c| (vec![0.0; VIEW_INPUT_DIM], c)).collect();
        assert!(matches!(train_view_classifier(&ex, &ViewTrainConfig::default()), Err(Error::MissingClass(6))));
    }

    #[test]
    fn classifier_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ViewClassifier::new(&mut rng);
        let x = Array2::from_shape_simple_fn((4, VIEW_INPUT_DIM), || rng.random_range(0.0f32..1.0));
        for row in m.predict_proba(&x).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
