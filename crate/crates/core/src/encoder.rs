//! Part-based gait encoder: residual backbone, temporal max pooling,
//! horizontal strip pooling and a per-part projection head, plus the
//! predictor used during contrastive pre-training.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, BatchNorm, Buffer, Conv2d, Mode, Module, Param, ParamGroup, PartMlp};
use crate::silhouette::{Clip, FRAME_HEIGHT, FRAME_WIDTH};

/// How the average- and max-pooled strip vectors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolCombine {
    /// `mean + max`, keeping the channel count.
    Add,
    /// `[mean, max]`, doubling the channel count fed to the head.
    Concat,
}

impl std::str::FromStr for PoolCombine {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            other => Err(format!("unknown pool combine `{other}` (expected add|concat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub block_strides: [usize; 4],
    pub parts: usize,
    pub embed_dim: usize,
    pub pool_combine: PoolCombine,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for EncoderConfig {
    /// Full-size encoder: 64-channel stem, blocks of (64, 128, 256, 512)
    /// channels with strides (2, 2, 1, 1), 16 parts of 512 dimensions.
    fn default() -> Self {
        Self {
            stem_channels: 64,
            block_channels: [64, 128, 256, 512],
            block_strides: [2, 2, 1, 1],
            parts: 16,
            embed_dim: 512,
            pool_combine: PoolCombine::Add,
            input_height: FRAME_HEIGHT,
            input_width: FRAME_WIDTH,
        }
    }
}

impl EncoderConfig {
    /// Same topology with narrow layers, for single-core desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            block_channels: [8, 16, 32, 32],
            embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.block_channels[3]
    }

    /// Spatial size of the map entering horizontal pooling.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for &s in &self.block_strides {
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
        }
        (h, w)
    }

    pub fn part_input_dim(&self) -> usize {
        match self.pool_combine {
            PoolCombine::Add => self.feature_channels(),
            PoolCombine::Concat => 2 * self.feature_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, _) = self.feature_hw();
        if self.parts == 0 || h % self.parts != 0 {
            return Err(Error::IndivisibleHeight { height: h, parts: self.parts });
        }
        if self.embed_dim == 0 || self.stem_channels == 0 || self.block_channels.contains(&0) {
            return Err(Error::ParamOutOfRange {
                name: "model.channels",
                value: format!("{:?}", self.block_channels),
                range: "positive",
            });
        }
        Ok(())
    }
}

/// Frames of several clips stacked as `[frames, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub frames: Array4<f32>,
    pub lengths: Vec<usize>,
}

impl ClipBatch {
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a Clip>, height: usize, width: usize) -> Result<Self> {
        let clips: Vec<&Clip> = clips.into_iter().collect();
        let total: usize = clips.iter().map(|c| c.len()).sum();
        let mut frames = Array4::<f32>::zeros((total, 1, height, width));
        let mut lengths = Vec::with_capacity(clips.len());
        let data = frames.as_slice_mut().expect("contiguous");
        let mut offset = 0;
        for clip in clips {
            if clip.is_empty() {
                return Err(Error::EmptySet("ClipBatch::from_clips"));
            }
            for f in &clip.frames {
                if (f.height(), f.width()) != (height, width) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{height}x{width}"),
                        actual: format!("{}x{}", f.height(), f.width()),
                    });
                }
                for (d, &p) in data[offset..offset + height * width].iter_mut().zip(f.pixels()) {
                    *d = p as f32;
                }
                offset += height * width;
            }
            lengths.push(clip.len());
        }
        Ok(Self { frames, lengths })
    }

    pub fn clips(&self) -> usize {
        self.lengths.len()
    }
}

struct BlockCache {
    mask1: Vec<bool>,
    mask_out: Vec<bool>,
}

/// Two 3×3 convolutions with a projected shortcut when shape changes.
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub down: Option<(Conv2d, BatchNorm)>,
    cache: Option<BlockCache>,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Backbone;
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), g, in_ch, out_ch, 1, stride, rng),
                BatchNorm::new(&format!("{name}.down.bn"), g, out_ch),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), g, in_ch, out_ch, 3, stride, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), g, out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), g, out_ch, out_ch, 3, 1, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), g, out_ch),
            down,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let mut h = self.bn1.forward4(self.conv1.forward(x, mode), mode);
        let mask1 = relu_inplace(h.as_slice_mut().expect("contiguous"));
        let mut h = self.bn2.forward4(self.conv2.forward(&h, mode), mode);
        match &mut self.down {
            Some((conv, bn)) => h += &bn.forward4(conv.forward(x, mode), mode),
            None => h += x,
        }
        let mask_out = relu_inplace(h.as_slice_mut().expect("contiguous"));
        self.cache = (mode == Mode::Train).then_some(BlockCache { mask1, mask_out });
        h
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("block backward without forward");
        let mut g = dy.clone();
        relu_backward(g.as_slice_mut().expect("contiguous"), &cache.mask_out);
        let mut gh = self.conv2.backward(&self.bn2.backward4(g.clone()));
        relu_backward(gh.as_slice_mut().expect("contiguous"), &cache.mask1);
        let mut dx = self.conv1.backward(&self.bn1.backward4(gh));
        match &mut self.down {
            Some((conv, bn)) => dx += &conv.backward(&bn.backward4(g)),
            None => dx += &g,
        }
        dx
    }

    fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn1.freeze(frozen);
        self.bn2.freeze(frozen);
        if let Some((_, bn)) = &mut self.down {
            bn.freeze(frozen);
        }
    }
}

impl Module for BasicBlock {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((c, b)) = &mut self.down {
            c.visit_params(f);
            b.visit_params(f);
        }
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, b)) = &mut self.down {
            b.visit_buffers(f);
        }
    }
}

pub struct Backbone {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<BasicBlock>,
    stem_mask: Option<Vec<bool>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Backbone;
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = cfg.stem_channels;
        for (i, (&ch, &s)) in cfg.block_channels.iter().zip(&cfg.block_strides).enumerate() {
            blocks.push(BasicBlock::new(&format!("backbone.rb{}", i + 1), in_ch, ch, s, rng));
            in_ch = ch;
        }
        Self {
            stem: Conv2d::new("backbone.stem.conv", g, 1, cfg.stem_channels, 3, 1, rng),
            stem_bn: BatchNorm::new("backbone.stem.bn", g, cfg.stem_channels),
            blocks,
            stem_mask: None,
        }
    }

    /// `[F, 1, H, W] → [F, C, H/4, W/4]`, frames processed independently
    /// (up to batch statistics in training mode).
    pub fn forward(&mut self, frames: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let mut h = self.stem_bn.forward4(self.stem.forward(frames, mode), mode);
        let mask = relu_inplace(h.as_slice_mut().expect("contiguous"));
        self.stem_mask = (mode == Mode::Train).then_some(mask);
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let mut g = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        relu_backward(g.as_slice_mut().expect("contiguous"), &self.stem_mask.take().expect("backbone backward without forward"));
        self.stem.backward(&self.stem_bn.backward4(g))
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.stem_bn.freeze(frozen);
        self.blocks.iter_mut().for_each(|b| b.set_bn_frozen(frozen));
    }
}

impl Module for Backbone {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.stem_bn.visit_buffers(f);
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

/// Elementwise maximum over each clip's frames. Returns the pooled maps
/// `[clips, C, H, W]` and, per output element, the winning frame row
/// (first on ties).
pub fn temporal_pool(frame_maps: &Array4<f32>, lengths: &[usize]) -> (Array4<f32>, Vec<u32>) {
    let (f, c, h, w) = frame_maps.dim();
    assert_eq!(lengths.iter().sum::<usize>(), f, "clip lengths must cover all frames");
    let per = c * h * w;
    let src = frame_maps.as_slice().expect("contiguous");
    let mut out = Array4::<f32>::zeros((lengths.len(), c, h, w));
    let mut argmax = vec![0u32; lengths.len() * per];
    let dst = out.as_slice_mut().expect("contiguous");
    let mut start = 0;
    for (i, &len) in lengths.iter().enumerate() {
        assert!(len >= 1, "temporal pooling needs at least one frame");
        let o = &mut dst[i * per..(i + 1) * per];
        let a = &mut argmax[i * per..(i + 1) * per];
        o.copy_from_slice(&src[start * per..(start + 1) * per]);
        a.fill(start as u32);
        for t in start + 1..start + len {
            for ((ov, av), &v) in o.iter_mut().zip(a.iter_mut()).zip(&src[t * per..(t + 1) * per]) {
                if v > *ov {
                    *ov = v;
                    *av = t as u32;
                }
            }
        }
        start += len;
    }
    (out, argmax)
}

fn temporal_pool_backward(grad: &Array4<f32>, argmax: &[u32], frames: usize) -> Array4<f32> {
    let (_, c, h, w) = grad.dim();
    let per = c * h * w;
    let mut dx = Array4::<f32>::zeros((frames, c, h, w));
    let dxs = dx.as_slice_mut().expect("contiguous");
    for (j, (&g, &t)) in grad.as_slice().expect("contiguous").iter().zip(argmax).enumerate() {
        dxs[t as usize * per + j % per] += g;
    }
    dx
}

/// Strip pooling cache: argmax position within each strip.
struct HpCache {
    argmax: Vec<u32>,
    dims: (usize, usize, usize, usize),
}

/// Splits `[N, C, H, W]` into `parts` horizontal strips and pools each to a
/// vector with mean and max over the strip's positions.
pub fn horizontal_pool(map: &Array4<f32>, parts: usize, combine: PoolCombine) -> Result<Array3<f32>> {
    Ok(horizontal_pool_impl(map, parts, combine)?.0)
}

fn horizontal_pool_impl(map: &Array4<f32>, parts: usize, combine: PoolCombine) -> Result<(Array3<f32>, HpCache)> {
    let (n, c, h, w) = map.dim();
    if parts == 0 || h % parts != 0 {
        return Err(Error::IndivisibleHeight { height: h, parts });
    }
    let rows = h / parts;
    let strip = rows * w;
    let src = map.as_slice().expect("contiguous");
    let dim = match combine {
        PoolCombine::Add => c,
        PoolCombine::Concat => 2 * c,
    };
    let mut out = Array3::<f32>::zeros((n, parts, dim));
    let mut argmax = vec![0u32; n * parts * c];
    for i in 0..n {
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for p in 0..parts {
                let vals = &plane[p * strip..(p + 1) * strip];
                let mut best = 0;
                let mut sum = 0.0f32;
                for (k, &v) in vals.iter().enumerate() {
                    sum += v;
                    if v > vals[best] {
                        best = k;
                    }
                }
                let mean = sum / strip as f32;
                let max = vals[best];
                argmax[(i * parts + p) * c + ch] = best as u32;
                match combine {
                    PoolCombine::Add => out[[i, p, ch]] = mean + max,
                    PoolCombine::Concat => {
                        out[[i, p, ch]] = mean;
                        out[[i, p, c + ch]] = max;
                    }
                }
            }
        }
    }
    Ok((out, HpCache { argmax, dims: (n, c, h, w) }))
}

fn horizontal_pool_backward(grad: &Array3<f32>, cache: &HpCache, parts: usize, combine: PoolCombine) -> Array4<f32> {
    let (n, c, h, w) = cache.dims;
    let strip = (h / parts) * w;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().expect("contiguous");
    for i in 0..n {
        for p in 0..parts {
            for ch in 0..c {
                let (g_mean, g_max) = match combine {
                    PoolCombine::Add => (grad[[i, p, ch]], grad[[i, p, ch]]),
                    PoolCombine::Concat => (grad[[i, p, ch]], grad[[i, p, c + ch]]),
                };
                let base = (i * c + ch) * h * w + p * strip;
                let share = g_mean / strip as f32;
                dxs[base..base + strip].iter_mut().for_each(|v| *v += share);
                dxs[base + cache.argmax[(i * parts + p) * c + ch] as usize] += g_max;
            }
        }
    }
    dx
}

struct EncoderCache {
    argmax_t: Vec<u32>,
    frames: usize,
    hp: HpCache,
}

/// Backbone → temporal pooling → horizontal pooling → projection head.
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub head: PartMlp,
    cache: Option<EncoderCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config, rng);
        let head = PartMlp::new(
            "head",
            ParamGroup::Projection,
            config.parts,
            config.part_input_dim(),
            config.embed_dim,
            config.embed_dim,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            backbone,
            head,
            cache: None,
        })
    }

    pub fn batch(&self, clips: &[&Clip]) -> Result<ClipBatch> {
        ClipBatch::from_clips(clips.iter().copied(), self.config.input_height, self.config.input_width)
    }

    /// Per-frame feature maps of one clip: `[T, C, h, w]`.
    pub fn forward_backbone(&mut self, clip: &Clip) -> Result<Array4<f32>> {
        let batch = self.batch(&[clip])?;
        Ok(self.backbone.forward(&batch.frames, Mode::Eval))
    }

    /// Applies the projection head to pooled part vectors `[N, P, C]`.
    pub fn project(&mut self, part_vectors: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, p, d) = part_vectors.dim();
        if (p, d) != (self.config.parts, self.config.part_input_dim()) {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, {}]", self.config.parts, self.config.part_input_dim()),
                actual: format!("{:?}", part_vectors.dim()),
            });
        }
        Ok(self.head.forward(part_vectors, Mode::Eval))
    }

    /// Embeddings `[clips, parts, embed_dim]` of a stacked batch.
    pub fn forward(&mut self, batch: &ClipBatch, mode: Mode) -> Result<Array3<f32>> {
        let maps = self.backbone.forward(&batch.frames, mode);
        let (pooled, argmax_t) = temporal_pool(&maps, &batch.lengths);
        let (parts, hp) = horizontal_pool_impl(&pooled, self.config.parts, self.config.pool_combine)?;
        let emb = self.head.forward(&parts, mode);
        self.cache = (mode == Mode::Train).then_some(EncoderCache {
            argmax_t,
            frames: batch.frames.dim().0,
            hp,
        });
        Ok(emb)
    }

    /// Pre-pooling part vectors `[clips, parts, C]` (no projection head).
    pub fn part_features(&mut self, batch: &ClipBatch) -> Result<Array3<f32>> {
        let maps = self.backbone.forward(&batch.frames, Mode::Eval);
        let (pooled, _) = temporal_pool(&maps, &batch.lengths);
        horizontal_pool(&pooled, self.config.parts, self.config.pool_combine)
    }

    /// Backpropagates `d loss / d embedding` into parameter gradients.
    pub fn backward(&mut self, grad: &Array3<f32>) {
        let cache = self.cache.take().expect("encoder backward without training forward");
        let g_parts = self.head.backward(grad);
        let g_pooled = horizontal_pool_backward(&g_parts, &cache.hp, self.config.parts, self.config.pool_combine);
        let g_maps = temporal_pool_backward(&g_pooled, &cache.argmax_t, cache.frames);
        self.backbone.backward(&g_maps);
    }

    /// Embedding of a single clip in inference mode.
    pub fn encode(&mut self, clip: &Clip) -> Result<Array3<f32>> {
        let batch = self.batch(&[clip])?;
        self.forward(&batch, Mode::Eval)
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.backbone.set_bn_frozen(frozen);
        self.head.bn0.freeze(frozen);
    }
}

impl Module for Encoder {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.backbone.visit_buffers(f);
        self.head.visit_buffers(f);
    }
}

/// Per-part two-layer predictor mapping one view's embedding to the other's.
pub struct Predictor {
    pub mlp: PartMlp,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(parts: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: PartMlp::new("predictor", ParamGroup::Predictor, parts, dim, dim, dim, rng),
        }
    }

    pub fn forward(&mut self, emb: &Array3<f32>, mode: Mode) -> Array3<f32> {
        self.mlp.forward(emb, mode)
    }

    pub fn backward(&mut self, grad: &Array3<f32>) -> Array3<f32> {
        self.mlp.backward(grad)
    }

    pub fn predict(&mut self, emb: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, p, d) = emb.dim();
        if (p, d) != (self.mlp.fc0.parts, self.mlp.fc0.in_dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, {}]", self.mlp.fc0.parts, self.mlp.fc0.in_dim),
                actual: format!("{:?}", emb.dim()),
            });
        }
        Ok(self.forward(emb, Mode::Eval))
    }
}

impl Module for Predictor {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.mlp.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.mlp.visit_buffers(f);
    }
}

/// L2-normalizes every part vector of `[N, P, D]` in place. Zero vectors
/// are left as zeros.
pub fn normalize_parts(x: &mut Array3<f32>) {
    for mut v in x.lanes_mut(Axis(2)) {
        let norm = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.mapv_inplace(|a| (a as f64 / norm) as f32);
        }
    }
}
