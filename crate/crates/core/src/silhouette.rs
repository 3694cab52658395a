//! Binary silhouette frames, gait sequences and clip sampling.
//!
//! Clip indices are positions along the cyclic extension of a sequence:
//! index `i` refers to source frame `i % frame_count`. For sequences long
//! enough to hold the requested window the two coincide.

use rand::Rng;

use crate::error::{Error, Result};

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;

/// A binary mask stored row-major, one byte per pixel with values in {0,1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SilhouetteFrame {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl SilhouetteFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    /// Builds a frame from row-major pixels. Any non-zero byte counts as
    /// foreground, so grayscale masks can be passed straight in.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} = {} pixels", height * width),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        let pixels = pixels.into_iter().map(|p| u8::from(p != 0)).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.pixels[row * self.width + col] = u8::from(on);
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.height == FRAME_HEIGHT && self.width == FRAME_WIDTH
    }

    /// First and last rows containing foreground.
    pub fn row_extent(&self) -> Option<(usize, usize)> {
        let rows = (0..self.height).filter(|&r| self.row(r).iter().any(|&p| p != 0));
        let mut top = None;
        let mut bottom = 0;
        for r in rows {
            top.get_or_insert(r);
            bottom = r;
        }
        top.map(|t| (t, bottom))
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Foreground mask that is true in `self` or in `other`.
    pub fn union(&self, other: &Self) -> Self {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| a | b)
                .collect(),
        }
    }

    /// True when every foreground pixel of `other` is also set in `self`.
    pub fn contains(&self, other: &Self) -> bool {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .all(|(&a, &b)| b == 0 || a != 0)
    }
}

/// Ordered silhouettes of one walking pass plus whatever labels are known.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence {
    pub sequence_id: String,
    pub subject_id: Option<String>,
    pub view: Option<String>,
    pub condition: Option<String>,
    frames: Vec<SilhouetteFrame>,
}

impl GaitSequence {
    pub fn new(sequence_id: impl Into<String>, frames: Vec<SilhouetteFrame>) -> Result<Self> {
        let sequence_id = sequence_id.into();
        let first = frames.first().ok_or(Error::EmptySet("GaitSequence::new"))?;
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = frames.iter().find(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w}"),
                actual: format!("{}x{}", bad.height(), bad.width()),
            });
        }
        Ok(Self {
            sequence_id,
            subject_id: None,
            view: None,
            condition: None,
            frames,
        })
    }

    pub fn with_labels(
        mut self,
        subject_id: Option<String>,
        view: Option<String>,
        condition: Option<String>,
    ) -> Self {
        self.subject_id = subject_id;
        self.view = view;
        self.condition = condition;
        self
    }

    pub fn frames(&self) -> &[SilhouetteFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }

    /// View angle parsed from the view tag, e.g. `"090"` → 90.
    pub fn view_degrees(&self) -> Option<f64> {
        self.view.as_deref().and_then(parse_view_degrees)
    }
}

pub fn parse_view_degrees(tag: &str) -> Option<f64> {
    tag.trim().trim_end_matches('°').parse::<f64>().ok()
}

/// Fixed-length window of frames fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub source_id: String,
    pub frames: Vec<SilhouetteFrame>,
    /// Positions along the cyclically extended source sequence.
    pub frame_indices: Vec<usize>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Whole sequence as a clip, used for full-length inference.
    pub fn from_sequence(seq: &GaitSequence) -> Self {
        Self {
            source_id: seq.sequence_id.clone(),
            frames: seq.frames.clone(),
            frame_indices: (0..seq.len()).collect(),
        }
    }

    pub fn map_frames(&self, f: impl FnMut(&SilhouetteFrame) -> SilhouetteFrame) -> Self {
        Self {
            source_id: self.source_id.clone(),
            frames: self.frames.iter().map(f).collect(),
            frame_indices: self.frame_indices.clone(),
        }
    }

    fn gather(seq: &GaitSequence, positions: impl Iterator<Item = usize>) -> Self {
        let n = seq.len();
        let frame_indices: Vec<usize> = positions.collect();
        let frames = frame_indices
            .iter()
            .map(|&i| seq.frames[i % n].clone())
            .collect();
        Self {
            source_id: seq.sequence_id.clone(),
            frames,
            frame_indices,
        }
    }
}

/// Crops the body to its vertical extent, scales it to `target_h` rows with
/// nearest-neighbour sampling (a row that sampling would leave empty keeps
/// its source row's pixels), then places it on a `target_w`-wide canvas
/// with its horizontal centre of mass at column `target_w / 2`.
pub fn size_normalize(
    raw: &SilhouetteFrame,
    target_h: usize,
    target_w: usize,
) -> Result<SilhouetteFrame> {
    let (top, bottom) = raw.row_extent().ok_or(Error::EmptySilhouette)?;
    let body_h = bottom - top + 1;
    if body_h < 2 {
        return Err(Error::DegenerateBody { height: body_h });
    }
    let scale = target_h as f64 / body_h as f64;
    let scaled_w = ((raw.width() as f64 * scale).round() as usize).max(1);

    // Nearest-neighbour source coordinate of the centre of output cell `i`.
    let src_row = |r: usize| (top + ((r as f64 + 0.5) / scale) as usize).min(bottom);
    let src_col = |c: usize| (((c as f64 + 0.5) / scale) as usize).min(raw.width() - 1);

    let mut scaled = vec![0u8; target_h * scaled_w];
    for r in 0..target_h {
        let sr = src_row(r);
        for c in 0..scaled_w {
            if raw.get(sr, src_col(c)) {
                scaled[r * scaled_w + c] = 1;
            }
        }
    }
    // Shrinking can skip every foreground column of a thin row, which would
    // empty the top or bottom row and break idempotence. Such a row instead
    // keeps each cell its source row's foreground pixels fall into.
    for r in 0..target_h {
        let row = &mut scaled[r * scaled_w..(r + 1) * scaled_w];
        if row.iter().any(|&v| v != 0) {
            continue;
        }
        let sr = src_row(r);
        for sc in (0..raw.width()).filter(|&sc| raw.get(sr, sc)) {
            row[(((sc as f64 + 0.5) * scale) as usize).min(scaled_w - 1)] = 1;
        }
    }
    let mut col_sum: i64 = 0;
    let mut count: i64 = 0;
    for (i, _) in scaled.iter().enumerate().filter(|(_, &v)| v != 0) {
        col_sum += (i % scaled_w) as i64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySilhouette);
    }
    // offset = floor(centre_of_mass - target_w/2 + 1/2), in exact integers so
    // that normalizing an already-normalized frame is a no-op.
    let half = (target_w / 2) as i64;
    let offset = (2 * col_sum - 2 * half * count + count).div_euclid(2 * count);

    Ok(SilhouetteFrame::from_fn(target_h, target_w, |r, c| {
        let sc = c as i64 + offset;
        (0..scaled_w as i64).contains(&sc) && scaled[r * scaled_w + sc as usize] != 0
    }))
}

/// A window of exactly `length` frames. Sequences shorter than the window
/// are repeated cyclically from their first frame.
pub fn sample_clip<R: Rng + ?Sized>(seq: &GaitSequence, length: usize, rng: &mut R) -> Clip {
    assert!(length >= 1, "clip length must be positive");
    let n = seq.len();
    let start = if n >= length {
        rng.random_range(0..=n - length)
    } else {
        0
    };
    Clip::gather(seq, start..start + length)
}

/// Two non-overlapping windows of `length` frames, returned in random order.
///
/// When the sequence holds fewer than `2 * length` frames it is cyclically
/// extended to exactly `2 * length` frames starting at a random phase, and
/// the extension is split in half.
pub fn sample_disjoint_clip_pair<R: Rng + ?Sized>(
    seq: &GaitSequence,
    length: usize,
    rng: &mut R,
) -> (Clip, Clip) {
    assert!(length >= 1, "clip length must be positive");
    let n = seq.len();
    let (first, second) = if n >= 2 * length {
        let a = rng.random_range(0..=n - 2 * length);
        let b = rng.random_range(a + length..=n - length);
        (a, b)
    } else {
        let phase = rng.random_range(0..n);
        (phase, phase + length)
    };
    let c1 = Clip::gather(seq, first..first + length);
    let c2 = Clip::gather(seq, second..second + length);
    if rng.random_bool(0.5) {
        (c2, c1)
    } else {
        (c1, c2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn numbered_sequence(n: usize) -> GaitSequence {
        // Frame i has pixel (0, i % 44) and (1, i / 44) lit, so frames are distinct.
        let frames = (0..n)
            .map(|i| {
                SilhouetteFrame::from_fn(FRAME_HEIGHT, FRAME_WIDTH, |r, c| {
                    (r == 0 && c == i % FRAME_WIDTH) || (r == 1 && c == i / FRAME_WIDTH)
                })
            })
            .collect();
        GaitSequence::new("seq", frames).unwrap()
    }

    #[test]
    fn empty_mask_is_rejected() {
        let f = SilhouetteFrame::zeros(30, 20);
        assert!(matches!(size_normalize(&f, 64, 44), Err(Error::EmptySilhouette)));
    }

    #[test]
    fn one_row_body_is_degenerate() {
        let f = SilhouetteFrame::from_fn(30, 20, |r, c| r == 5 && c > 3);
        assert!(matches!(
            size_normalize(&f, 64, 44),
            Err(Error::DegenerateBody { height: 1 })
        ));
    }

    #[test]
    fn centered_rectangle_scales_by_height() {
        // 100x30 block centred in a 128x88 mask: scale 64/100, width round(30*0.64) = 19.
        let raw = SilhouetteFrame::from_fn(128, 88, |r, c| (14..114).contains(&r) && (29..59).contains(&c));
        let out = size_normalize(&raw, 64, 44).unwrap();
        assert_eq!((out.height(), out.width()), (64, 44));
        assert_eq!(out.row_extent(), Some((0, 63)));
        for r in 0..64 {
            let cols: Vec<usize> = (0..44).filter(|&c| out.get(r, c)).collect();
            assert_eq!(cols.len(), 19, "row {r}");
            let centre = (cols[0] + cols[18]) as f64 / 2.0;
            assert!((centre - 22.0).abs() <= 1.0, "row {r} centre {centre}");
        }
        assert!(out.pixels().iter().all(|&p| p <= 1));
    }

    #[test]
    fn normalization_is_idempotent_on_simple_body() {
        let raw = SilhouetteFrame::from_fn(90, 70, |r, c| {
            (10..80).contains(&r) && (20..35).contains(&c) || (40..60).contains(&r) && c == 50
        });
        let once = size_normalize(&raw, 64, 44).unwrap();
        let twice = size_normalize(&once, 64, 44).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn exact_fit_clip_is_whole_sequence() {
        let seq = numbered_sequence(30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = sample_clip(&seq, 30, &mut rng);
        assert_eq!(clip.frame_indices, (0..30).collect::<Vec<_>>());
        assert_eq!(clip.frames, seq.frames());
    }

    #[test]
    fn long_sequence_clips_are_contiguous() {
        let seq = numbered_sequence(100);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let clip = sample_clip(&seq, 16, &mut rng);
            assert_eq!(clip.len(), 16);
            assert!(clip.frame_indices.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(*clip.frame_indices.last().unwrap() < 100);
        }
    }

    #[test]
    fn short_sequence_clip_wraps_cyclically() {
        let seq = numbered_sequence(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = sample_clip(&seq, 16, &mut rng);
        let sources: Vec<usize> = clip.frame_indices.iter().map(|i| i % 10).collect();
        let expected: Vec<usize> = (0..10).chain(0..6).collect();
        assert_eq!(sources, expected);
        assert!(clip.frame_indices.windows(2).all(|w| w[0] <= w[1]));
        for (frame, src) in clip.frames.iter().zip(&expected) {
            assert_eq!(frame, &seq.frames()[*src]);
        }
    }

    #[test]
    fn exact_double_length_pair_partitions_sequence() {
        let seq = numbered_sequence(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b) = sample_disjoint_clip_pair(&seq, 16, &mut rng);
            let mut all: Vec<usize> = a.frame_indices.iter().chain(&b.frame_indices).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pair_from_long_sequence_is_disjoint_and_order_random() {
        let seq = numbered_sequence(100);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut first_is_earlier = 0;
        for _ in 0..1000 {
            let (a, b) = sample_disjoint_clip_pair(&seq, 16, &mut rng);
            let sa: HashSet<_> = a.frame_indices.iter().collect();
            assert!(b.frame_indices.iter().all(|i| !sa.contains(i)));
            if a.frame_indices[0] < b.frame_indices[0] {
                first_is_earlier += 1;
            }
        }
        assert!((400..600).contains(&first_is_earlier), "{first_is_earlier}");
    }

    #[test]
    fn short_sequence_pair_splits_cyclic_extension() {
        let seq = numbered_sequence(20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (a, b) = sample_disjoint_clip_pair(&seq, 16, &mut rng);
            let mut ext: Vec<usize> = a.frame_indices.iter().chain(&b.frame_indices).copied().collect();
            ext.sort_unstable();
            let start = ext[0];
            // The two halves tile 32 consecutive positions of the extension.
            assert_eq!(ext, (start..start + 32).collect::<Vec<_>>());
            assert!(start < 20);
            for clip in [&a, &b] {
                for (frame, pos) in clip.frames.iter().zip(&clip.frame_indices) {
                    assert_eq!(frame, &seq.frames()[pos % 20]);
                }
            }
        }
    }

    #[test]
    fn sequence_rejects_mixed_dimensions() {
        let frames = vec![SilhouetteFrame::zeros(64, 44), SilhouetteFrame::zeros(64, 40)];
        assert!(GaitSequence::new("x", frames).is_err());
        assert!(GaitSequence::new("x", vec![]).is_err());
    }
}
