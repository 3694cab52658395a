//! Procedural walking silhouettes with controllable identity, view and
//! walking condition.
//!
//! A walker is a stick body (head disc, torso capsule, two-segment arms and
//! legs) animated with sinusoidal joint angles. Points live in body
//! coordinates `(forward, lateral, row)` and are projected onto the image
//! with `x = cx + forward * sin(view) + lateral * cos(view)`, so profile
//! views show the full stride and frontal views show none of it.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_dilation, DilationParams, KernelShape};
use crate::error::{Error, Result};
use crate::silhouette::{Clip, GaitSequence, SilhouetteFrame, FRAME_HEIGHT, FRAME_WIDTH};

const GROUND_ROW: f64 = 62.5;
const CENTER_X: f64 = FRAME_WIDTH as f64 / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub fn tag(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Self::Nm),
            "bg" => Ok(Self::Bg),
            "cl" => Ok(Self::Cl),
            other => Err(format!("unknown condition `{other}` (expected nm|bg|cl)")),
        }
    }
}

/// Body shape and gait style of one synthetic subject. Lengths are in
/// pixels of the 64×44 canvas, angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub head_radius: f64,
    pub torso_length: f64,
    pub torso_width: f64,
    pub torso_depth: f64,
    pub hip_half_width: f64,
    pub thigh_fraction: f64,
    pub leg_radius: f64,
    pub arm_radius: f64,
    pub arm_length: f64,
    pub lean_deg: f64,
    pub stride_deg: f64,
    pub arm_swing_deg: f64,
    pub knee_flex_deg: f64,
    pub period: usize,
    pub phase: f64,
}

/// `(name, min, max)` for every continuous identity parameter.
const RANGES: [(&str, f64, f64); 13] = [
    ("head_radius", 3.0, 5.0),
    ("torso_length", 14.0, 20.0),
    ("torso_width", 7.0, 12.0),
    ("torso_depth", 5.0, 8.0),
    ("hip_half_width", 1.5, 3.5),
    ("thigh_fraction", 0.42, 0.56),
    ("leg_radius", 1.3, 2.4),
    ("arm_radius", 0.9, 1.6),
    ("arm_length", 15.0, 22.0),
    ("lean_deg", 0.0, 8.0),
    ("stride_deg", 16.0, 32.0),
    ("arm_swing_deg", 8.0, 30.0),
    ("knee_flex_deg", 15.0, 45.0),
];
const PERIOD_RANGE: (usize, usize) = (10, 16);

impl SyntheticIdentity {
    fn params(&self) -> [f64; 13] {
        [
            self.head_radius,
            self.torso_length,
            self.torso_width,
            self.torso_depth,
            self.hip_half_width,
            self.thigh_fraction,
            self.leg_radius,
            self.arm_radius,
            self.arm_length,
            self.lean_deg,
            self.stride_deg,
            self.arm_swing_deg,
            self.knee_flex_deg,
        ]
    }

    fn from_params(p: [f64; 13], period: usize, phase: f64) -> Self {
        Self {
            head_radius: p[0],
            torso_length: p[1],
            torso_width: p[2],
            torso_depth: p[3],
            hip_half_width: p[4],
            thigh_fraction: p[5],
            leg_radius: p[6],
            arm_radius: p[7],
            arm_length: p[8],
            lean_deg: p[9],
            stride_deg: p[10],
            arm_swing_deg: p[11],
            knee_flex_deg: p[12],
            period,
            phase,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = [0.0; 13];
        for (v, &(_, lo, hi)) in p.iter_mut().zip(&RANGES) {
            *v = rng.random_range(lo..=hi);
        }
        let period = rng.random_range(PERIOD_RANGE.0..=PERIOD_RANGE.1);
        Self::from_params(p, period, rng.random_range(0.0..2.0 * PI))
    }

    pub fn validate(&self) -> Result<()> {
        for (v, &(name, lo, hi)) in self.params().iter().zip(&RANGES) {
            if !(lo..=hi).contains(v) {
                return Err(Error::ParamOutOfRange {
                    name,
                    value: v.to_string(),
                    range: "documented identity range",
                });
            }
        }
        if self.period < 4 {
            return Err(Error::ParamOutOfRange {
                name: "period",
                value: self.period.to_string(),
                range: ">= 4",
            });
        }
        Ok(())
    }

    /// Largest normalized difference over the continuous parameters.
    pub fn separation(&self, other: &Self) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .zip(&RANGES)
            .map(|((a, b), &(_, lo, hi))| (a - b).abs() / (hi - lo))
            .fold(0.0, f64::max)
    }
}

/// Draws `n` identities whose parameter vectors pairwise differ by at least
/// `min_separation` (normalized units) in some coordinate.
pub fn sample_identities<R: Rng + ?Sized>(n: usize, min_separation: f64, rng: &mut R) -> Vec<SyntheticIdentity> {
    let mut out: Vec<SyntheticIdentity> = Vec::with_capacity(n);
    while out.len() < n {
        let cand = SyntheticIdentity::random(rng);
        if out.iter().all(|o| o.separation(&cand) >= min_separation) {
            out.push(cand);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Point {
    forward: f64,
    lateral: f64,
    row: f64,
}

impl Point {
    fn new(forward: f64, lateral: f64, row: f64) -> Self {
        Self { forward, lateral, row }
    }
}

enum Shape {
    Capsule { a: (f64, f64), b: (f64, f64), radius: f64 },
    Ellipse { center: (f64, f64), rx: f64, ry: f64 },
}

impl Shape {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Capsule { a, b, radius } => (
                a.0.min(b.0) - radius,
                a.0.max(b.0) + radius,
                a.1.min(b.1) - radius,
                a.1.max(b.1) + radius,
            ),
            Shape::Ellipse { center, rx, ry } => (center.0 - rx, center.0 + rx, center.1 - ry, center.1 + ry),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Capsule { a, b, radius } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 { 0.0 } else { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) };
                let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
                px * px + py * py <= radius * radius
            }
            Shape::Ellipse { center, rx, ry } => ((x - center.0) / rx).powi(2) + ((y - center.1) / ry).powi(2) <= 1.0,
        }
    }
}

fn rasterize(shapes: &[Shape]) -> SilhouetteFrame {
    let mut frame = SilhouetteFrame::zeros(FRAME_HEIGHT, FRAME_WIDTH);
    for s in shapes {
        let (x0, x1, y0, y1) = s.bounds();
        let c0 = x0.floor().max(0.0) as usize;
        let c1 = (x1.ceil() as isize).clamp(0, FRAME_WIDTH as isize - 1) as usize;
        let r0 = y0.floor().max(0.0) as usize;
        let r1 = (y1.ceil() as isize).clamp(0, FRAME_HEIGHT as isize - 1) as usize;
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for r in r0..=r1 {
            for c in c0..=c1 {
                if s.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    frame.set(r, c, true);
                }
            }
        }
    }
    frame
}

/// Rows spanned by the torso (shoulder to hip) of `id`, independent of the
/// frame and view: `(top, height)`.
pub fn torso_band(id: &SyntheticIdentity) -> (usize, usize) {
    let (shoulder, hip) = body_rows(id);
    let top = shoulder.floor().max(0.0) as usize;
    let bottom = (hip.ceil() as usize).min(FRAME_HEIGHT - 1);
    (top, bottom + 1 - top)
}

/// Shoulder and hip rows. The skeleton is laid out so that a straight leg
/// reaches the ground row.
fn body_rows(id: &SyntheticIdentity) -> (f64, f64) {
    let head_top = 1.0;
    let shoulder = head_top + 2.0 * id.head_radius + 1.0;
    let hip = shoulder + id.torso_length;
    (shoulder, hip)
}

fn render_pose(id: &SyntheticIdentity, view_deg: f64, t: usize, condition: Condition) -> SilhouetteFrame {
    let (sv, cv) = (view_deg.to_radians().sin(), view_deg.to_radians().cos());
    let project = |p: Point| (CENTER_X + p.forward * sv + p.lateral * cv, p.row);
    let phi = 2.0 * PI * (t % id.period) as f64 / id.period as f64 + id.phase;
    let (shoulder_row, hip_row) = body_rows(id);
    let leg_len = GROUND_ROW - hip_row - id.leg_radius;
    let thigh = leg_len * id.thigh_fraction;
    let shank = leg_len - thigh;
    let lean = id.lean_deg.to_radians();

    let mut legs = Vec::new();
    let mut lowest = f64::MIN;
    for (side, sign) in [(-1.0, 1.0), (1.0, -1.0)] {
        let swing = sign * id.stride_deg.to_radians() * phi.sin();
        // The knee bends while the leg swings forward.
        let flex = id.knee_flex_deg.to_radians() * (sign * phi.cos()).max(0.0);
        let hip = Point::new(0.0, side * id.hip_half_width, hip_row);
        let knee = Point::new(hip.forward + thigh * swing.sin(), hip.lateral, hip.row + thigh * swing.cos());
        let shin = swing - flex;
        let foot = Point::new(knee.forward + shank * shin.sin(), knee.lateral, knee.row + shank * shin.cos());
        lowest = lowest.max(foot.row);
        legs.push((hip, knee, foot));
    }
    // Vertical bounce: keep the lower foot on the ground.
    let lift = GROUND_ROW - id.leg_radius - lowest;

    let shoulder_half = id.torso_width / 2.0;
    let neck = Point::new(id.torso_length * lean.sin(), 0.0, shoulder_row);
    let torso_half = (id.torso_width / 2.0 * cv).abs() + (id.torso_depth / 2.0 * sv).abs();
    let upper = id.arm_length * 0.5;
    let mut shapes = vec![
        Shape::Ellipse {
            center: project(Point::new(neck.forward + 0.5, 0.0, 1.0 + id.head_radius + lift)),
            rx: id.head_radius,
            ry: id.head_radius,
        },
        Shape::Capsule {
            a: project(Point::new(neck.forward, 0.0, shoulder_row + torso_half * 0.5 + lift)),
            b: project(Point::new(0.0, 0.0, hip_row + lift)),
            radius: torso_half,
        },
    ];
    for (hip, knee, foot) in &legs {
        let up = |p: &Point| Point::new(p.forward, p.lateral, p.row + lift);
        shapes.push(Shape::Capsule { a: project(up(hip)), b: project(up(knee)), radius: id.leg_radius });
        shapes.push(Shape::Capsule { a: project(up(knee)), b: project(up(foot)), radius: id.leg_radius * 0.85 });
    }
    for (side, sign) in [(-1.0, -1.0), (1.0, 1.0)] {
        let swing = sign * id.arm_swing_deg.to_radians() * phi.sin();
        let sh = Point::new(neck.forward, side * shoulder_half, shoulder_row + 1.0 + lift);
        let elbow = Point::new(sh.forward + upper * swing.sin(), sh.lateral, sh.row + upper * swing.cos());
        let fore = swing + 0.35;
        let hand = Point::new(elbow.forward + upper * fore.sin(), elbow.lateral, elbow.row + upper * fore.cos());
        shapes.push(Shape::Capsule { a: project(sh), b: project(elbow), radius: id.arm_radius });
        shapes.push(Shape::Capsule { a: project(elbow), b: project(hand), radius: id.arm_radius });
    }
    if condition == Condition::Bg {
        let hand_row = shoulder_row + id.arm_length + lift;
        shapes.push(Shape::Ellipse {
            center: project(Point::new(1.0, shoulder_half + 2.5, hand_row - 2.0)),
            rx: 3.5,
            ry: 4.5,
        });
    }
    let mut frame = rasterize(&shapes);
    if condition == Condition::Cl {
        let (top, height) = torso_band(id);
        let clip = Clip {
            source_id: String::new(),
            frames: vec![frame],
            frame_indices: vec![0],
        };
        let coat = DilationParams {
            shape: KernelShape::Rectangle,
            size: 5,
            band_top: top,
            band_height: height,
        };
        frame = apply_dilation(&clip, coat).frames.pop().expect("one frame");
    }
    frame
}

/// Flips each boundary pixel (one whose 4-neighbourhood contains the other
/// value) with probability `level`.
fn add_boundary_noise<R: Rng + ?Sized>(frame: &SilhouetteFrame, level: f64, rng: &mut R) -> SilhouetteFrame {
    if level <= 0.0 {
        return frame.clone();
    }
    let (h, w) = (frame.height(), frame.width());
    let mut out = frame.clone();
    for r in 0..h {
        for c in 0..w {
            let v = frame.get(r, c);
            let boundary = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dr, dc)| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && frame.get(rr as usize, cc as usize) != v
            });
            if boundary && rng.random_bool(level) {
                out.set(r, c, !v);
            }
        }
    }
    out
}

/// Renders `n_frames` of `id` walking under `condition`, seen from
/// `view_deg`.
pub fn render_sequence<R: Rng + ?Sized>(
    id: &SyntheticIdentity,
    view_deg: f64,
    n_frames: usize,
    condition: Condition,
    noise_level: f64,
    rng: &mut R,
) -> Result<GaitSequence> {
    id.validate()?;
    if !(0.0..=180.0).contains(&view_deg) {
        return Err(Error::ParamOutOfRange {
            name: "view",
            value: view_deg.to_string(),
            range: "[0, 180]",
        });
    }
    if !(0.0..=0.5).contains(&noise_level) {
        return Err(Error::ParamOutOfRange {
            name: "noise",
            value: noise_level.to_string(),
            range: "[0, 0.5]",
        });
    }
    if n_frames == 0 {
        return Err(Error::ParamOutOfRange {
            name: "frames",
            value: "0".into(),
            range: ">= 1",
        });
    }
    let frames = (0..n_frames)
        .map(|t| add_boundary_noise(&render_pose(id, view_deg, t, condition), noise_level, rng))
        .collect();
    GaitSequence::new("synthetic", frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_ids: usize,
    pub views: Vec<f64>,
    /// Each condition with its number of sequences per (subject, view).
    pub conditions: Vec<(Condition, usize)>,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(n_ids: usize, views: Vec<f64>, conditions: &[Condition], seqs_per_cell: usize, frames: usize, seed: u64) -> Self {
        Self {
            n_ids,
            views,
            conditions: conditions.iter().map(|&c| (c, seqs_per_cell)).collect(),
            frames,
            noise: 0.02,
            seed,
        }
    }

    /// Eleven views 0..180 in 18 degree steps with 6 NM, 2 BG and 2 CL
    /// sequences per view, the layout of the common indoor benchmark.
    pub fn casia_like(n_ids: usize, frames: usize, seed: u64) -> Self {
        Self {
            n_ids,
            views: (0..11).map(|i| i as f64 * 18.0).collect(),
            conditions: vec![(Condition::Nm, 6), (Condition::Bg, 2), (Condition::Cl, 2)],
            frames,
            noise: 0.02,
            seed,
        }
    }
}

pub fn subject_tag(i: usize) -> String {
    format!("{:03}", i + 1)
}

pub fn view_tag(view: f64) -> String {
    format!("{:03}", view.round() as i64)
}

/// Generates the labeled corpus. Sequence ids follow
/// `subject-condition-index-view`, e.g. `007-nm-02-090`; the condition tag
/// stored on the sequence is `nm-02`.
pub fn build_corpus(spec: &CorpusSpec) -> Result<(Vec<SyntheticIdentity>, Vec<GaitSequence>)> {
    if spec.n_ids < 2 {
        return Err(Error::ParamOutOfRange {
            name: "ids",
            value: spec.n_ids.to_string(),
            range: ">= 2",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identities = sample_identities(spec.n_ids, 0.05, &mut rng);
    let mut sequences = Vec::new();
    for (i, id) in identities.iter().enumerate() {
        for &(cond, count) in &spec.conditions {
            for k in 0..count {
                for &view in &spec.views {
                    // Each recording starts at its own phase of the cycle.
                    let mut walk = id.clone();
                    walk.phase = rng.random_range(0.0..2.0 * PI);
                    let seq = render_sequence(&walk, view, spec.frames, cond, spec.noise, &mut rng)?;
                    let cond_tag = format!("{}-{:02}", cond.tag(), k + 1);
                    let seq_id = format!("{}-{}-{}", subject_tag(i), cond_tag, view_tag(view));
                    let frames = seq.frames().to_vec();
                    sequences.push(GaitSequence::new(seq_id, frames)?.with_labels(
                        Some(subject_tag(i)),
                        Some(view_tag(view)),
                        Some(cond_tag),
                    ));
                }
            }
        }
    }
    Ok((identities, sequences))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walker(seed: u64) -> SyntheticIdentity {
        SyntheticIdentity::random(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn deterministic_and_periodic() {
        let id = walker(1);
        let a = render_sequence(&id, 90.0, 2 * id.period + 1, Condition::Nm, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = render_sequence(&id, 90.0, 2 * id.period + 1, Condition::Nm, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.frames(), b.frames());
        for t in 0..=id.period {
            assert_eq!(a.frames()[t], a.frames()[t + id.period]);
        }
        assert!(a.frames().iter().all(|f| f.is_normalized() && f.foreground_count() > 100));
    }

    #[test]
    fn clothing_changes_only_the_torso_band() {
        for seed in 0..5 {
            let id = walker(seed);
            let (top, height) = torso_band(&id);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let nm = render_sequence(&id, 54.0, 6, Condition::Nm, 0.0, &mut rng).unwrap();
            let cl = render_sequence(&id, 54.0, 6, Condition::Cl, 0.0, &mut rng).unwrap();
            let mut differs = false;
            for (a, b) in nm.frames().iter().zip(cl.frames()) {
                for r in 0..FRAME_HEIGHT {
                    if a.row(r) != b.row(r) {
                        assert!((top..top + height).contains(&r), "row {r} outside band");
                        differs = true;
                    }
                }
            }
            assert!(differs);
        }
    }

    #[test]
    fn view_controls_stride_width() {
        let id = walker(3);
        let width = |view: f64| {
            let s = render_sequence(&id, view, id.period, Condition::Nm, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            s.frames()
                .iter()
                .map(|f| {
                    let cols: Vec<usize> = (0..FRAME_WIDTH).filter(|&c| (50..60).any(|r| f.get(r, c))).collect();
                    cols.last().unwrap() - cols.first().unwrap()
                })
                .max()
                .unwrap()
        };
        assert!(width(90.0) > width(0.0) + 4);
    }

    #[test]
    fn bag_adds_foreground() {
        let id = walker(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nm = render_sequence(&id, 90.0, 4, Condition::Nm, 0.0, &mut rng).unwrap();
        let bg = render_sequence(&id, 90.0, 4, Condition::Bg, 0.0, &mut rng).unwrap();
        for (a, b) in nm.frames().iter().zip(bg.frames()) {
            assert!(b.contains(a) && b.foreground_count() > a.foreground_count());
        }
    }

    #[test]
    fn parameter_validation() {
        let mut id = walker(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(render_sequence(&id, 200.0, 4, Condition::Nm, 0.0, &mut rng).is_err());
        assert!(render_sequence(&id, 90.0, 4, Condition::Nm, 0.9, &mut rng).is_err());
        id.period = 3;
        assert!(matches!(render_sequence(&id, 90.0, 4, Condition::Nm, 0.0, &mut rng), Err(Error::ParamOutOfRange { .. })));
    }

    #[test]
    fn corpus_counts_and_labels() {
        let spec = CorpusSpec::new(50, (0..11).map(|i| i as f64 * 18.0).collect(), &[Condition::Nm], 2, 3, 7);
        let (ids, seqs) = build_corpus(&spec).unwrap();
        assert_eq!(seqs.len(), 1100);
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert!(a.separation(b) >= 0.05);
            }
        }
        let s = &seqs[0];
        assert_eq!(s.sequence_id, "001-nm-01-000");
        assert_eq!(s.subject_id.as_deref(), Some("001"));
        assert_eq!(s.condition.as_deref(), Some("nm-01"));
        let mut unique: Vec<_> = seqs.iter().map(|s| s.sequence_id.clone()).collect();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), seqs.len());
    }

    #[test]
    fn raw_average_silhouettes_beat_chance() {
        // Nearest neighbour on mean silhouettes, same view, across sequences.
        let spec = CorpusSpec::new(10, vec![90.0], &[Condition::Nm], 2, 24, 3);
        let (_, seqs) = build_corpus(&spec).unwrap();
        let mean = |s: &GaitSequence| -> Vec<f64> {
            let mut m = vec![0.0; FRAME_HEIGHT * FRAME_WIDTH];
            for f in s.frames() {
                for (a, &p) in m.iter_mut().zip(f.pixels()) {
                    *a += p as f64;
                }
            }
            m
        };
        let gallery: Vec<_> = seqs.iter().filter(|s| s.condition.as_deref() == Some("nm-01")).collect();
        let probes: Vec<_> = seqs.iter().filter(|s| s.condition.as_deref() == Some("nm-02")).collect();
        let hits = probes
            .iter()
            .filter(|p| {
                let pm = mean(p);
                let best = gallery
                    .iter()
                    .min_by(|a, b| {
                        let d = |g: &&&GaitSequence| mean(g).iter().zip(&pm).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                        d(a).partial_cmp(&d(b)).unwrap()
                    })
                    .unwrap();
                best.subject_id == p.subject_id
            })
            .count();
        assert!(hits as f64 / probes.len() as f64 > 0.1 * 2.0, "hits {hits}");
    }
}
