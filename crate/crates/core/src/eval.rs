//! Embedding extraction and probe/gallery retrieval protocols.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{normalize_parts, ClipBatch, Encoder};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::silhouette::{parse_view_degrees, Clip, GaitSequence};
use crate::transfer::{checkpoint_encoder_config, FineTuneHead, FineTuneModel};

/// One sequence's part embedding (`[parts, dim]`, unit rows) with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sequence_id: String,
    pub subject_id: Option<String>,
    pub view: Option<String>,
    pub condition: Option<String>,
    pub embedding: Array2<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// A model that maps sequences to part embeddings: a bare encoder from
/// pre-training, or an encoder with a fine-tuned metric head.
pub enum EmbeddingModel {
    Encoder(Encoder),
    FineTuned(FineTuneModel),
}

impl EmbeddingModel {
    /// Builds the model described by a checkpoint's metadata and loads it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = checkpoint_encoder_config(ck)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut encoder = Encoder::new(&config, &mut rng)?;
        let kind = ck.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("pretrain");
        if kind == "finetune" {
            let head_dim = ck
                .meta
                .get("head_dim")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Format("fine-tuned checkpoint lacks head_dim".into()))?;
            let head = FineTuneHead::new(config.parts, config.embed_dim, head_dim as usize, &mut rng);
            let mut model = FineTuneModel { encoder, head };
            ck.load_into(&mut model)?;
            Ok(Self::FineTuned(model))
        } else {
            ck.load_into(&mut encoder)?;
            Ok(Self::Encoder(encoder))
        }
    }

    fn encoder(&self) -> &Encoder {
        match self {
            Self::Encoder(e) => e,
            Self::FineTuned(m) => &m.encoder,
        }
    }

    /// Inference-mode embeddings `[N, parts, dim]`, parts L2-normalized.
    pub fn embed(&mut self, batch: &ClipBatch) -> Result<ndarray::Array3<f32>> {
        let mut out = match self {
            Self::Encoder(e) => e.forward(batch, Mode::Eval)?,
            Self::FineTuned(m) => m.forward(batch, Mode::Eval)?,
        };
        normalize_parts(&mut out);
        Ok(out)
    }
}

const EXTRACT_CHUNK: usize = 8;

/// Embeds every sequence using all of its frames.
pub fn extract_embeddings(model: &mut EmbeddingModel, sequences: &[GaitSequence]) -> Result<EmbeddingSet> {
    let (h, w) = {
        let c = &model.encoder().config;
        (c.input_height, c.input_width)
    };
    let mut records = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(EXTRACT_CHUNK) {
        let clips: Vec<Clip> = chunk.iter().map(Clip::from_sequence).collect();
        let batch = ClipBatch::from_clips(&clips, h, w)?;
        let emb = model.embed(&batch)?;
        for (seq, e) in chunk.iter().zip(emb.axis_iter(Axis(0))) {
            records.push(EmbeddingRecord {
                sequence_id: seq.sequence_id.clone(),
                subject_id: seq.subject_id.clone(),
                view: seq.view.clone(),
                condition: seq.condition.clone(),
                embedding: e.to_owned(),
            });
        }
    }
    Ok(EmbeddingSet { records })
}

/// Mean over parts of the per-part Euclidean distance.
pub fn pairwise_distance(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    let parts = a.nrows();
    if parts == 0 {
        return Ok(0.0);
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / parts as f64)
}

/// Evaluation protocol named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CasiaB,
    CasiaBStar,
    OuMvlp,
    OuMvlpNoSkip,
    Grew,
    Gait3d,
    Synthetic,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "casiab" => Self::CasiaB,
            "casiab_star" => Self::CasiaBStar,
            "oumvlp" => Self::OuMvlp,
            "oumvlp_noskip" => Self::OuMvlpNoSkip,
            "grew" => Self::Grew,
            "gait3d" => Self::Gait3d,
            "synthetic" => Self::Synthetic,
            other => {
                return Err(Error::TypeError {
                    key: "protocol".into(),
                    value: other.into(),
                    line: None,
                    reason: "expected casiab, casiab_star, oumvlp, oumvlp_noskip, grew, gait3d or synthetic".into(),
                })
            }
        })
    }
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::CasiaB => "casiab",
            Self::CasiaBStar => "casiab_star",
            Self::OuMvlp => "oumvlp",
            Self::OuMvlpNoSkip => "oumvlp_noskip",
            Self::Grew => "grew",
            Self::Gait3d => "gait3d",
            Self::Synthetic => "synthetic",
        }
    }

    pub fn rules(self) -> MatchRules {
        match self {
            Self::CasiaB | Self::CasiaBStar | Self::Synthetic | Self::OuMvlpNoSkip => MatchRules {
                cross_view: true,
                skip_empty: false,
            },
            Self::OuMvlp => MatchRules {
                cross_view: true,
                skip_empty: true,
            },
            Self::Grew | Self::Gait3d => MatchRules {
                cross_view: false,
                skip_empty: false,
            },
        }
    }
}

/// How probes are matched and aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchRules {
    /// Restrict each probe to one gallery view at a time and average the
    /// off-diagonal (probe view, gallery view) cells.
    pub cross_view: bool,
    /// Drop probes whose subject has no candidate in the gallery instead of
    /// counting them as misses.
    pub skip_empty: bool,
}

/// Rank-1 accuracy (percent) per (probe view, gallery view) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMatrix {
    pub probe_views: Vec<String>,
    pub gallery_views: Vec<String>,
    /// `None` for identical views and for cells with no counted probe.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ViewMatrix {
    /// Mean of the included cells.
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().flatten().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe\\gallery");
        for g in &self.gallery_views {
            out.push(',');
            out.push_str(g);
        }
        out.push('\n');
        for (p, row) in self.probe_views.iter().zip(&self.cells) {
            out.push_str(p);
            for c in row {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Heatmap image, `cell` pixels per entry: black (0%) to white (100%)
    /// through red; excluded cells are mid grey.
    pub fn to_image(&self, cell: u32) -> image::RgbImage {
        let (rows, cols) = (self.probe_views.len() as u32, self.gallery_views.len() as u32);
        image::RgbImage::from_fn(cols * cell, rows * cell, |x, y| {
            let v = self.cells[(y / cell) as usize][(x / cell) as usize];
            match v {
                None => image::Rgb([128, 128, 128]),
                Some(v) => {
                    let t = (v / 100.0).clamp(0.0, 1.0);
                    let r = (255.0 * (2.0 * t).min(1.0)) as u8;
                    let gb = (255.0 * (2.0 * t - 1.0).max(0.0)) as u8;
                    image::Rgb([r, gb, gb])
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub protocol: String,
    /// Overall rank-1 accuracy in percent.
    pub rank1: f64,
    pub per_condition: BTreeMap<String, f64>,
    /// Cross-view matrices keyed by condition; empty for plain protocols.
    pub view_matrix: BTreeMap<String, ViewMatrix>,
    pub probes_evaluated: usize,
    pub probes_skipped: usize,
}

impl RetrievalResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Index into `gallery` of the nearest candidate (lowest index on ties),
/// ignoring the probe's own sequence.
pub fn nearest(probe: &EmbeddingRecord, gallery: &[&EmbeddingRecord]) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gallery.iter().enumerate() {
        if g.sequence_id == probe.sequence_id {
            continue;
        }
        let d = pairwise_distance(probe.embedding.view(), g.embedding.view())?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    Ok(best.map(|(i, _)| i))
}

fn subject<'a>(r: &'a EmbeddingRecord) -> Result<&'a str> {
    r.subject_id.as_deref().ok_or_else(|| Error::MissingLabels(r.sequence_id.clone()))
}

fn view<'a>(r: &'a EmbeddingRecord) -> Result<&'a str> {
    r.view.as_deref().ok_or_else(|| Error::MissingMetadata {
        id: r.sequence_id.clone(),
        field: "view",
    })
}

/// Views sorted by angle when they parse as degrees, else by name.
fn sorted_views(records: &[&EmbeddingRecord]) -> Result<Vec<String>> {
    let mut views: Vec<String> = records.iter().map(|r| view(r).map(str::to_string)).collect::<Result<_>>()?;
    views.sort_by(|a, b| match (parse_view_degrees(a), parse_view_degrees(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    });
    views.dedup();
    Ok(views)
}

/// Outcome of matching one probe against one candidate gallery.
enum Outcome {
    Hit,
    Miss,
    Skipped,
}

fn match_probe(probe: &EmbeddingRecord, candidates: &[&EmbeddingRecord], skip_empty: bool) -> Result<Outcome> {
    let sid = subject(probe)?;
    let owns = candidates.iter().any(|g| g.sequence_id != probe.sequence_id && g.subject_id.as_deref() == Some(sid));
    if !owns && skip_empty {
        return Ok(Outcome::Skipped);
    }
    Ok(match nearest(probe, candidates)? {
        Some(i) if subject(candidates[i])? == sid => Outcome::Hit,
        Some(_) => Outcome::Miss,
        None if skip_empty => Outcome::Skipped,
        None => return Err(Error::EmptyGalleryForProbe(probe.sequence_id.clone())),
    })
}

/// Cross-view rank-1 matrix. Identical-view cells are reported as `None`
/// and never evaluated.
pub fn cross_view_heatmap(probe: &[&EmbeddingRecord], gallery: &[&EmbeddingRecord], skip_empty: bool) -> Result<(ViewMatrix, usize, usize)> {
    let probe_views = sorted_views(probe)?;
    let gallery_views = sorted_views(gallery)?;
    let mut cells = vec![vec![None; gallery_views.len()]; probe_views.len()];
    let (mut evaluated, mut skipped) = (0, 0);
    for (gi, gv) in gallery_views.iter().enumerate() {
        let cand: Vec<&EmbeddingRecord> = gallery.iter().copied().filter(|g| g.view.as_deref() == Some(gv.as_str())).collect();
        for (pi, pv) in probe_views.iter().enumerate() {
            if pv == gv {
                continue;
            }
            let (mut hits, mut count) = (0usize, 0usize);
            for p in probe.iter().filter(|p| p.view.as_deref() == Some(pv.as_str())) {
                match match_probe(p, &cand, skip_empty)? {
                    Outcome::Hit => {
                        hits += 1;
                        count += 1;
                    }
                    Outcome::Miss => count += 1,
                    Outcome::Skipped => skipped += 1,
                }
            }
            evaluated += count;
            if count > 0 {
                cells[pi][gi] = Some(100.0 * hits as f64 / count as f64);
            }
        }
    }
    Ok((
        ViewMatrix {
            probe_views,
            gallery_views,
            cells,
        },
        evaluated,
        skipped,
    ))
}

/// Rank-1 accuracy of `probe` against `gallery` under `rules`: either the
/// mean of the off-diagonal cross-view cells or the plain hit rate.
pub fn rank1(probe: &[&EmbeddingRecord], gallery: &[&EmbeddingRecord], rules: MatchRules) -> Result<(f64, Option<ViewMatrix>, usize, usize)> {
    if probe.is_empty() {
        return Err(Error::EmptySet("probe set"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyGalleryForProbe(probe[0].sequence_id.clone()));
    }
    if rules.cross_view {
        let (m, evaluated, skipped) = cross_view_heatmap(probe, gallery, rules.skip_empty)?;
        return Ok((m.mean().unwrap_or(0.0), Some(m), evaluated, skipped));
    }
    let (mut hits, mut count, mut skipped) = (0usize, 0usize, 0usize);
    for p in probe {
        match match_probe(p, gallery, rules.skip_empty)? {
            Outcome::Hit => {
                hits += 1;
                count += 1;
            }
            Outcome::Miss => count += 1,
            Outcome::Skipped => skipped += 1,
        }
    }
    let acc = if count == 0 { 0.0 } else { 100.0 * hits as f64 / count as f64 };
    Ok((acc, None, count, skipped))
}

fn condition<'a>(r: &'a EmbeddingRecord) -> Result<&'a str> {
    r.condition.as_deref().ok_or_else(|| Error::MissingMetadata {
        id: r.sequence_id.clone(),
        field: "condition",
    })
}

/// Probe subsets (label, members) and the gallery under a protocol.
type Partition<'a> = (Vec<(String, Vec<&'a EmbeddingRecord>)>, Vec<&'a EmbeddingRecord>);

/// Splits a labeled set into gallery and named probe subsets.
///
/// * CASIA-B layouts: gallery `nm-01..nm-04`; probes `nm-05/06` (NM),
///   `bg-*` (BG), `cl-*` (CL).
/// * OU-MVLP: gallery sequence `00`, probe sequence `01`.
/// * GREW / Gait3D: condition tags `gallery` and `probe`.
/// * Synthetic: gallery `nm-01`; every other sequence is a probe, grouped
///   by its condition prefix.
pub fn partition(set: &EmbeddingSet, protocol: Protocol) -> Result<Partition<'_>> {
    let mut gallery = Vec::new();
    let mut probes: BTreeMap<String, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in &set.records {
        subject(r)?;
        let cond = condition(r)?.to_ascii_lowercase();
        let prefix = cond.split('-').next().unwrap_or("").to_string();
        let number = cond.rsplit('-').next().and_then(|n| n.parse::<u32>().ok());
        let role = match protocol {
            Protocol::CasiaB | Protocol::CasiaBStar => match (prefix.as_str(), number) {
                ("nm", Some(1..=4)) => Some(None),
                ("nm", Some(5..=6)) => Some(Some("NM")),
                ("bg", Some(_)) => Some(Some("BG")),
                ("cl", Some(_)) => Some(Some("CL")),
                _ => None,
            },
            Protocol::OuMvlp | Protocol::OuMvlpNoSkip => match number {
                Some(0) => Some(None),
                Some(1) => Some(Some("all")),
                _ => None,
            },
            Protocol::Grew | Protocol::Gait3d => match cond.as_str() {
                "gallery" => Some(None),
                "probe" => Some(Some("all")),
                _ => None,
            },
            Protocol::Synthetic => Some(if cond == "nm-01" { None } else { Some(prefix.as_str()) }),
        };
        match role {
            Some(None) => gallery.push(r),
            Some(Some(label)) => {
                let label = if protocol == Protocol::Synthetic { label.to_ascii_uppercase() } else { label.to_string() };
                probes.entry(label).or_default().push(r);
            }
            None => log::debug!("sequence {} ({cond}) is outside the {} protocol", r.sequence_id, protocol.name()),
        }
        if protocol.rules().cross_view {
            view(r)?;
        }
    }
    Ok((probes.into_iter().collect(), gallery))
}

/// Runs a full protocol: partition, per-condition rank-1 and the overall
/// score (the mean of the per-condition scores).
pub fn evaluate_protocol(set: &EmbeddingSet, protocol: Protocol) -> Result<RetrievalResult> {
    let (probes, gallery) = partition(set, protocol)?;
    if probes.is_empty() {
        return Err(Error::EmptySet("probe set"));
    }
    let rules = protocol.rules();
    let mut per_condition = BTreeMap::new();
    let mut view_matrix = BTreeMap::new();
    let (mut evaluated, mut skipped) = (0, 0);
    for (label, members) in &probes {
        let (acc, matrix, e, s) = rank1(members, &gallery, rules)?;
        per_condition.insert(label.clone(), acc);
        if let Some(m) = matrix {
            view_matrix.insert(label.clone(), m);
        }
        evaluated += e;
        skipped += s;
    }
    let rank1 = per_condition.values().sum::<f64>() / per_condition.len() as f64;
    Ok(RetrievalResult {
        protocol: protocol.name().to_string(),
        rank1,
        per_condition,
        view_matrix,
        probes_evaluated: evaluated,
        probes_skipped: skipped,
    })
}

/// CASIA-B evaluation with NM, BG and CL probe subsets.
pub fn casia_b_protocol(set: &EmbeddingSet) -> Result<RetrievalResult> {
    evaluate_protocol(set, Protocol::CasiaB)
}
