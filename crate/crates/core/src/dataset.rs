//! Packed sequence containers, manifests and directory-tree import.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "GSSB" | format_version u32 | entry_count u64
//! per sequence:
//!   id_len u16 | id bytes
//!   3 × (present u8 | len u16 | bytes)      subject, view, condition
//!   H u16 | W u16 | T u32
//!   ceil(T·H·W / 8) bytes of frames, row-major, MSB-first bit order
//! ```
//!
//! The manifest sits next to the container as JSON lines: a header record
//! followed by one record per sequence.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::silhouette::{size_normalize, GaitSequence, SilhouetteFrame, FRAME_HEIGHT, FRAME_WIDTH};

pub const CONTAINER_MAGIC: &[u8; 4] = b"GSSB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `root/<subject>/<condition>/<view>/<frame>.png`
    Casia,
    /// `root/<sequence_id>/<frame>.png`
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "casia" => Ok(Layout::Casia),
            "flat" => Ok(Layout::Flat),
            other => Err(format!("unknown layout `{other}` (expected casia|flat)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStorage {
    /// One bit per pixel inside the container file.
    Packed,
    /// Lossless single-channel PNGs under `<container>.frames/<sequence_id>/`.
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrameLocation {
    Packed { offset: u64 },
    Png { dir: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub subject_id: Option<String>,
    pub view: Option<String>,
    pub condition: Option<String>,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub location: FrameLocation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format_version: u32,
    storage: FrameStorage,
    container: String,
    entries: usize,
    skipped: Vec<SkipRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub storage: FrameStorage,
    /// Container file, or the frame root for PNG storage.
    pub container: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkipRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, sequence_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sequence_id == sequence_id)
    }

    /// Writes the manifest. A container inside the manifest's directory is
    /// recorded relative to it, so the pair can be moved together.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let container = path
            .parent()
            .and_then(|dir| self.container.strip_prefix(dir).ok())
            .unwrap_or(&self.container);
        let header = ManifestHeader {
            format_version: self.format_version,
            storage: self.storage,
            container: container.to_string_lossy().into_owned(),
            entries: self.entries.len(),
            skipped: self.skipped.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("manifest has no header".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut entries = Vec::with_capacity(header.entries);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        if entries.len() != header.entries {
            return Err(Error::Format(format!(
                "manifest declares {} entries, found {}",
                header.entries,
                entries.len()
            )));
        }
        let container = PathBuf::from(header.container);
        let container = match path.parent() {
            Some(dir) if container.is_relative() => dir.join(container),
            _ => container,
        };
        Ok(Self {
            format_version: header.format_version,
            storage: header.storage,
            container,
            entries,
            skipped: header.skipped,
        })
    }
}

/// Conventional manifest location for a container path.
pub fn manifest_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".manifest.jsonl");
    PathBuf::from(s)
}

fn png_root(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".frames");
    PathBuf::from(s)
}

fn check_unique(sequences: &[GaitSequence]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in sequences {
        if !seen.insert(s.sequence_id.as_str()) {
            return Err(Error::DuplicateSequence(s.sequence_id.clone()));
        }
    }
    Ok(())
}

fn write_opt_str(w: &mut impl Write, s: &Option<String>) -> Result<()> {
    match s {
        Some(s) => {
            w.write_all(&[1])?;
            write_str(w, s)
        }
        None => {
            w.write_all(&[0])?;
            w.write_all(&0u16.to_le_bytes())?;
            Ok(())
        }
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn pack_bits(frames: &[SilhouetteFrame]) -> Vec<u8> {
    let total: usize = frames.iter().map(|f| f.pixels().len()).sum();
    let mut out = vec![0u8; total.div_ceil(8)];
    for (i, &p) in frames.iter().flat_map(|f| f.pixels()).enumerate() {
        if p != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], h: usize, w: usize, t: usize) -> Result<Vec<SilhouetteFrame>> {
    let per = h * w;
    (0..t)
        .map(|f| {
            let pixels = (0..per)
                .map(|j| {
                    let i = f * per + j;
                    u8::from(bytes[i / 8] & (0x80 >> (i % 8)) != 0)
                })
                .collect();
            SilhouetteFrame::from_pixels(h, w, pixels)
        })
        .collect()
}

/// Writes all sequences into a packed container and returns its manifest.
/// The manifest is not saved; see [`DatasetManifest::save`].
pub fn write_container(path: &Path, sequences: &[GaitSequence]) -> Result<DatasetManifest> {
    check_unique(sequences)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(sequences.len() as u64).to_le_bytes())?;
    let mut offset = 16u64;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut block = Vec::new();
        write_str(&mut block, &seq.sequence_id)?;
        write_opt_str(&mut block, &seq.subject_id)?;
        write_opt_str(&mut block, &seq.view)?;
        write_opt_str(&mut block, &seq.condition)?;
        let (h, wd) = seq.frame_dims();
        let dims_err = || Error::Format(format!("sequence `{}` too large", seq.sequence_id));
        block.extend_from_slice(&u16::try_from(h).map_err(|_| dims_err())?.to_le_bytes());
        block.extend_from_slice(&u16::try_from(wd).map_err(|_| dims_err())?.to_le_bytes());
        block.extend_from_slice(&u32::try_from(seq.len()).map_err(|_| dims_err())?.to_le_bytes());
        block.extend_from_slice(&pack_bits(seq.frames()));
        w.write_all(&block)?;
        entries.push(ManifestEntry {
            sequence_id: seq.sequence_id.clone(),
            subject_id: seq.subject_id.clone(),
            view: seq.view.clone(),
            condition: seq.condition.clone(),
            frame_count: seq.len(),
            height: h,
            width: wd,
            location: FrameLocation::Packed { offset },
        });
        offset += block.len() as u64;
    }
    w.flush()?;
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        storage: FrameStorage::Packed,
        container: path.to_path_buf(),
        entries,
        skipped: Vec::new(),
    })
}

/// Writes every frame as a PNG under `root/<sequence_id>/NNNNN.png`.
pub fn write_png_tree(root: &Path, sequences: &[GaitSequence]) -> Result<DatasetManifest> {
    check_unique(sequences)?;
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let dir = root.join(&seq.sequence_id);
        fs::create_dir_all(&dir)?;
        for (i, frame) in seq.frames().iter().enumerate() {
            let img = image::GrayImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
                image::Luma([if frame.get(y as usize, x as usize) { 255 } else { 0 }])
            });
            let path = dir.join(format!("{i:05}.png"));
            img.save(&path).map_err(|e| Error::CorruptFrame {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        let (h, w) = seq.frame_dims();
        entries.push(ManifestEntry {
            sequence_id: seq.sequence_id.clone(),
            subject_id: seq.subject_id.clone(),
            view: seq.view.clone(),
            condition: seq.condition.clone(),
            frame_count: seq.len(),
            height: h,
            width: w,
            location: FrameLocation::Png {
                dir: seq.sequence_id.clone(),
            },
        });
    }
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        storage: FrameStorage::Png,
        container: root.to_path_buf(),
        entries,
        skipped: Vec::new(),
    })
}

struct BlockHeader {
    id: String,
    subject: Option<String>,
    view: Option<String>,
    condition: Option<String>,
    h: usize,
    w: usize,
    t: usize,
}

impl BlockHeader {
    fn payload_len(&self) -> usize {
        (self.h * self.w * self.t).div_ceil(8)
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(buf)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn read_opt_str(r: &mut impl Read) -> Result<Option<String>> {
    let [flag] = read_exact::<1>(r)?;
    let s = read_str(r)?;
    Ok((flag != 0).then_some(s))
}

fn read_block_header(r: &mut impl Read) -> Result<BlockHeader> {
    let id = read_str(r)?;
    let subject = read_opt_str(r)?;
    let view = read_opt_str(r)?;
    let condition = read_opt_str(r)?;
    let h = u16::from_le_bytes(read_exact(r)?) as usize;
    let w = u16::from_le_bytes(read_exact(r)?) as usize;
    let t = u32::from_le_bytes(read_exact(r)?) as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("sequence `{id}` has zero-sized frames")));
    }
    Ok(BlockHeader {
        id,
        subject,
        view,
        condition,
        h,
        w,
        t,
    })
}

fn read_block_body(r: &mut impl Read, header: BlockHeader) -> Result<GaitSequence> {
    let mut payload = vec![0u8; header.payload_len()];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated frames for `{}`: {e}", header.id)))?;
    let frames = unpack_bits(&payload, header.h, header.w, header.t)?;
    Ok(GaitSequence::new(header.id, frames)?.with_labels(header.subject, header.view, header.condition))
}

fn read_container_header(r: &mut impl Read) -> Result<u64> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "container format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(u64::from_le_bytes(read_exact(r)?))
}

/// Reads every sequence of a packed container, in stored order.
pub fn read_container(path: &Path) -> Result<Vec<GaitSequence>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_container_header(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let header = read_block_header(&mut r)?;
        out.push(read_block_body(&mut r, header)?);
    }
    check_unique(&out)?;
    Ok(out)
}

/// Rebuilds the manifest of a packed container from its block headers.
pub fn scan_container(path: &Path) -> Result<DatasetManifest> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_container_header(&mut r)?;
    let mut offset = 16u64;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let header = read_block_header(&mut r)?;
        let skip = header.payload_len() as i64;
        r.seek_relative(skip)?;
        let next = r.stream_position()?;
        entries.push(ManifestEntry {
            sequence_id: header.id,
            subject_id: header.subject,
            view: header.view,
            condition: header.condition,
            frame_count: header.t,
            height: header.h,
            width: header.w,
            location: FrameLocation::Packed { offset },
        });
        offset = next;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        storage: FrameStorage::Packed,
        container: path.to_path_buf(),
        entries,
        skipped: Vec::new(),
    };
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.sequence_id.as_str()) {
            return Err(Error::DuplicateSequence(e.sequence_id.clone()));
        }
    }
    Ok(manifest)
}

/// Loads one sequence through the manifest's recorded location.
pub fn load_sequence(manifest: &DatasetManifest, sequence_id: &str) -> Result<GaitSequence> {
    let entry = manifest
        .entry(sequence_id)
        .ok_or_else(|| Error::UnknownSequence(sequence_id.to_string()))?;
    let seq = match &entry.location {
        FrameLocation::Packed { offset } => {
            let mut r = BufReader::new(File::open(&manifest.container)?);
            r.seek(SeekFrom::Start(*offset))?;
            let header = read_block_header(&mut r)?;
            if header.id != entry.sequence_id {
                return Err(Error::Format(format!(
                    "offset {offset} holds `{}`, manifest says `{}`",
                    header.id, entry.sequence_id
                )));
            }
            read_block_body(&mut r, header)?
        }
        FrameLocation::Png { dir } => {
            let frames = read_frame_dir(&manifest.container.join(dir))?;
            GaitSequence::new(entry.sequence_id.clone(), frames)?.with_labels(
                entry.subject_id.clone(),
                entry.view.clone(),
                entry.condition.clone(),
            )
        }
    };
    if seq.len() != entry.frame_count || seq.frame_dims() != (entry.height, entry.width) {
        return Err(Error::Format(format!(
            "`{sequence_id}` stores {} frames of {:?}, manifest records {} of {:?}",
            seq.len(),
            seq.frame_dims(),
            entry.frame_count,
            (entry.height, entry.width)
        )));
    }
    Ok(seq)
}

/// Loads every sequence listed in the manifest.
pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<GaitSequence>> {
    match manifest.storage {
        FrameStorage::Packed => read_container(&manifest.container),
        FrameStorage::Png => manifest
            .entries
            .iter()
            .map(|e| load_sequence(manifest, &e.sequence_id))
            .collect(),
    }
}

/// Opens a dataset given either a packed container or a manifest file.
pub fn open_dataset(path: &Path) -> Result<(DatasetManifest, Vec<GaitSequence>)> {
    let manifest = if path.extension().is_some_and(|e| e == "jsonl") {
        DatasetManifest::load(path)?
    } else {
        scan_container(path)?
    };
    let sequences = load_all(&manifest)?;
    Ok((manifest, sequences))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp" | "pgm" | "tif" | "tiff"))
}

fn sorted_children(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() == dirs && (dirs || is_image(&path)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_frame(path: &Path) -> Result<SilhouetteFrame> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptFrame {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    SilhouetteFrame::from_pixels(h as usize, w as usize, img.into_raw())
}

/// Reads all image frames of a directory in lexicographic order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<SilhouetteFrame>> {
    sorted_children(dir, false)?
        .iter()
        .map(|p| read_frame(p))
        .collect()
}

#[derive(Clone, Debug)]
pub struct PackOptions {
    pub layout: Layout,
    pub storage: FrameStorage,
    /// Size-normalize frames to 64×44; frames without a usable body are dropped.
    pub normalize: bool,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            layout: Layout::Flat,
            storage: FrameStorage::Packed,
            normalize: true,
        }
    }
}

struct RawSequence {
    dir: PathBuf,
    id: String,
    subject: Option<String>,
    condition: Option<String>,
    view: Option<String>,
}

fn name_of(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn discover(root: &Path, layout: Layout) -> Result<Vec<RawSequence>> {
    let mut out = Vec::new();
    match layout {
        Layout::Flat => {
            for dir in sorted_children(root, true)? {
                out.push(RawSequence {
                    id: name_of(&dir),
                    dir,
                    subject: None,
                    condition: None,
                    view: None,
                });
            }
        }
        Layout::Casia => {
            for subject in sorted_children(root, true)? {
                for condition in sorted_children(&subject, true)? {
                    for view in sorted_children(&condition, true)? {
                        let (s, c, v) = (name_of(&subject), name_of(&condition), name_of(&view));
                        out.push(RawSequence {
                            id: format!("{s}-{c}-{v}"),
                            dir: view,
                            subject: Some(s),
                            condition: Some(c),
                            view: Some(v),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Imports a directory tree of silhouette images, writes the container (and
/// PNG frame tree when requested) plus the manifest at
/// [`manifest_path`]`(container)`.
pub fn pack_dataset(root: &Path, container: &Path, opts: &PackOptions) -> Result<DatasetManifest> {
    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for raw in discover(root, opts.layout)? {
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateSequence(raw.id));
        }
        let mut frames = read_frame_dir(&raw.dir)?;
        if opts.normalize {
            let mut kept = Vec::with_capacity(frames.len());
            for f in frames {
                match size_normalize(&f, FRAME_HEIGHT, FRAME_WIDTH) {
                    Ok(n) => kept.push(n),
                    Err(Error::EmptySilhouette | Error::DegenerateBody { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            frames = kept;
        }
        if frames.is_empty() {
            log::warn!("skipping `{}`: no usable frames", raw.dir.display());
            skipped.push(SkipRecord {
                path: raw.dir.display().to_string(),
                reason: "no usable frames".into(),
            });
            continue;
        }
        let seq = GaitSequence::new(raw.id, frames)
            .map_err(|e| Error::CorruptFrame {
                path: raw.dir.clone(),
                reason: e.to_string(),
            })?
            .with_labels(raw.subject, raw.view, raw.condition);
        sequences.push(seq);
    }
    let mut manifest = match opts.storage {
        FrameStorage::Packed => write_container(container, &sequences)?,
        FrameStorage::Png => write_png_tree(&png_root(container), &sequences)?,
    };
    manifest.skipped = skipped;
    manifest.save(&manifest_path(container))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sequence(id: &str, t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> GaitSequence {
        let frames = (0..t)
            .map(|_| SilhouetteFrame::from_fn(h, w, |_, _| rng.random_bool(0.3)))
            .collect();
        GaitSequence::new(id, frames).unwrap()
    }

    fn save_png(path: &Path, frame: &SilhouetteFrame) {
        let img = image::GrayImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
            image::Luma([if frame.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).unwrap();
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs = vec![
            random_sequence("a", 3, 64, 44, &mut rng).with_labels(Some("001".into()), Some("090".into()), None),
            random_sequence("b", 1, 5, 7, &mut rng),
        ];
        let path = dir.path().join("d.gssb");
        let manifest = write_container(&path, &seqs).unwrap();
        assert_eq!(read_container(&path).unwrap(), seqs);
        for s in &seqs {
            assert_eq!(&load_sequence(&manifest, &s.sequence_id).unwrap(), s);
        }
        assert_eq!(scan_container(&path).unwrap(), manifest);
    }

    #[test]
    fn manifest_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs = vec![random_sequence("x", 2, 8, 8, &mut rng)];
        let path = dir.path().join("d.gssb");
        let manifest = write_container(&path, &seqs).unwrap();
        let mp = manifest_path(&path);
        manifest.save(&mp).unwrap();
        assert_eq!(DatasetManifest::load(&mp).unwrap(), manifest);
        // The pair still opens after the directory moves.
        let moved = dir.path().join("moved");
        fs::create_dir(&moved).unwrap();
        fs::rename(&path, moved.join("d.gssb")).unwrap();
        fs::rename(&mp, manifest_path(&moved.join("d.gssb"))).unwrap();
        let (_, loaded) = open_dataset(&manifest_path(&moved.join("d.gssb"))).unwrap();
        assert_eq!(loaded, seqs);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seqs = vec![random_sequence("a", 1, 4, 4, &mut rng), random_sequence("a", 1, 4, 4, &mut rng)];
        assert!(matches!(
            write_container(&dir.path().join("d"), &seqs),
            Err(Error::DuplicateSequence(id)) if id == "a"
        ));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));
    }

    #[test]
    fn casia_layout_parses_labels_and_skips_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("raw");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for subject in ["001", "002"] {
            for cond in ["nm-01", "bg-01"] {
                for view in ["000", "090"] {
                    let d = root.join(subject).join(cond).join(view);
                    fs::create_dir_all(&d).unwrap();
                    if subject == "002" && cond == "bg-01" && view == "090" {
                        continue; // left empty
                    }
                    for i in 0..3 {
                        let f = random_sequence("t", 1, 64, 44, &mut rng).frames()[0].clone();
                        save_png(&d.join(format!("{i:03}.png")), &f);
                    }
                }
            }
        }
        let container = dir.path().join("casia.gssb");
        let opts = PackOptions {
            layout: Layout::Casia,
            storage: FrameStorage::Packed,
            normalize: false,
        };
        let manifest = pack_dataset(&root, &container, &opts).unwrap();
        assert_eq!(manifest.len(), 7);
        assert_eq!(manifest.skipped.len(), 1);
        let e = manifest.entry("002-nm-01-090").unwrap();
        assert_eq!(e.subject_id.as_deref(), Some("002"));
        assert_eq!(e.condition.as_deref(), Some("nm-01"));
        assert_eq!(e.view.as_deref(), Some("090"));
        assert_eq!(e.frame_count, 3);
        let on_disk = DatasetManifest::load(&manifest_path(&container)).unwrap();
        assert_eq!(on_disk, manifest);
    }

    #[test]
    fn flat_layout_png_storage_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("raw");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let original = random_sequence("seq_a", 4, 64, 44, &mut rng);
        let d = root.join("seq_a");
        fs::create_dir_all(&d).unwrap();
        for (i, f) in original.frames().iter().enumerate() {
            save_png(&d.join(format!("{i:02}.png")), f);
        }
        for storage in [FrameStorage::Packed, FrameStorage::Png] {
            let container = dir.path().join(format!("out-{storage:?}"));
            let opts = PackOptions {
                layout: Layout::Flat,
                storage,
                normalize: false,
            };
            let manifest = pack_dataset(&root, &container, &opts).unwrap();
            assert_eq!(load_sequence(&manifest, "seq_a").unwrap(), original);
        }
    }

    #[test]
    fn unreadable_frame_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("raw").join("s");
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("000.png"), b"not a png").unwrap();
        let err = pack_dataset(&dir.path().join("raw"), &dir.path().join("c"), &PackOptions::default());
        assert!(matches!(err, Err(Error::CorruptFrame { .. })));
    }
}
