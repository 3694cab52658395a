use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gaitlab_core::checkpoint::Checkpoint;
use gaitlab_core::dataset::{open_dataset, pack_dataset, write_container, FrameStorage, Layout, PackOptions};
use gaitlab_core::eval::{evaluate_protocol, extract_embeddings, EmbeddingModel, EmbeddingSet, Protocol, RetrievalResult};
use gaitlab_core::pretrain::{self, run_pretraining};
use gaitlab_core::probe::{bounds_report, build_chain, radius_sampler, verify_subset_bound, verify_transitivity, TOLERANCE};
use gaitlab_core::silhouette::GaitSequence;
use gaitlab_core::synthetic::{build_corpus, Condition, CorpusSpec};
use gaitlab_core::transfer::{self, finetune, train_from_scratch, TransferDataset};
use gaitlab_core::view::{
    build_view_input, classify_sequence, read_stats_table, read_view_labels, train_view_classifier, view_class, view_clips,
    write_stats_table, ViewClassifier,
};
use serde_json::json;

use crate::config::{load_config, RunConfig};

/// Bad invocation or configuration: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "gaitlab",
    version,
    about = "Self-supervised gait pre-training, transfer and evaluation",
    arg_required_else_help = true,
    after_help = "Any configuration key can be overridden with `--<key> <value>`, e.g. `--pretrain.lr 0.01`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (the `seed` key).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pack a directory tree of silhouette images into a container.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "flat")]
        layout: Layout,
        /// `packed` keeps bit-packed frames in the container, `png` writes a frame tree next to it.
        #[arg(long, default_value = "packed", value_parser = parse_storage)]
        storage: FrameStorage,
        /// Keep frames as read instead of size-normalizing them to 64x44.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Generate a labeled synthetic corpus.
    Synth {
        #[arg(long)]
        ids: usize,
        /// Comma-separated view angles in degrees.
        #[arg(long, default_value = "0,90")]
        views: String,
        /// Comma-separated conditions out of nm, bg, cl.
        #[arg(long, default_value = "nm")]
        conditions: String,
        #[arg(long, default_value_t = 2)]
        seqs_per_cell: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the view classifier on labeled sequences.
    TrainViewClassifier {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// `sequence_id<TAB>angle` lines.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-sequence view statistics for the sampling augmentation.
    ClassifyViews {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// View-statistics table; required unless sampling is disabled.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Run directory (default `$GAITLAB_HOME/runs/pretrain-seed<S>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_spatial: bool,
        #[arg(long)]
        no_intraseq: bool,
        #[arg(long)]
        no_sampling: bool,
        #[arg(long)]
        no_negatives: bool,
        #[arg(long)]
        subset_frac: Option<f64>,
    },
    /// Supervised transfer from a pre-trained checkpoint or from random weights.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path, or `random` to train from scratch.
        #[arg(long)]
        init: String,
        #[arg(long)]
        data: PathBuf,
        /// Selects the batch layout and schedule presets.
        #[arg(long)]
        dataset: TransferDataset,
        #[arg(long)]
        subject_frac: Option<f64>,
        /// Run directory (default `$GAITLAB_HOME/runs/finetune-seed<S>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank-1 retrieval under an evaluation protocol.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        /// Result JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the extracted embeddings as JSON.
        #[arg(long)]
        save_embeddings: Option<PathBuf>,
    },
    /// Render a cross-view accuracy matrix as PNG or CSV.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        result: PathBuf,
        /// Output path; the `.csv` extension selects CSV, anything else PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the distance inequalities on an embedding set.
    HypothesisCheck {
        /// Embedding JSON from `evaluate --save-embeddings`, or text with one vector per line.
        #[arg(long)]
        embeddings: PathBuf,
        /// One class label per line, in embedding order.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        pi_radius: f64,
        #[arg(long)]
        chain_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_storage(s: &str) -> Result<FrameStorage, String> {
    match s {
        "packed" => Ok(FrameStorage::Packed),
        "png" => Ok(FrameStorage::Png),
        other => Err(format!("unknown storage `{other}` (expected packed|png)")),
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success, 1 on domain errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

/// Pulls `--ns.key value` and `--ns.key=value` pairs out of `args`.
fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), UsageError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.iter().enumerate();
    while let Some((i, arg)) = it.next() {
        let key = arg.strip_prefix("--").filter(|k| i > 0 && k.split('=').next().is_some_and(|n| n.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let (_, v) = it.next().ok_or_else(|| UsageError(format!("`--{k}` needs a value")))?;
                    overrides.push((k.to_string(), v.clone()));
                }
            },
            None => rest.push(arg.clone()),
        }
    }
    Ok((rest, overrides))
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Prepare { .. } => "prepare",
        Command::Synth { .. } => "synth",
        Command::TrainViewClassifier { .. } => "train-view-classifier",
        Command::ClassifyViews { .. } => "classify-views",
        Command::Pretrain { .. } => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Evaluate { .. } => "evaluate",
        Command::Heatmap { .. } => "heatmap",
        Command::HypothesisCheck { .. } => "hypothesis-check",
    }
}

/// Defaults, then the file, then subcommand flags, then `--ns.key` overrides.
fn resolve(base: RunConfig, args: &ConfigArgs, mut flags: Vec<(String, String)>, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    if let Some(seed) = args.seed {
        flags.insert(0, ("seed".into(), seed.to_string()));
    }
    flags.extend(overrides.iter().cloned());
    let cfg = load_config(base, args.config.as_deref(), &flags).map_err(|e| UsageError(e.to_string()))?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn default_run_dir(command: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os("GAITLAB_HOME").map_or_else(|| PathBuf::from("gaitlab-runs"), PathBuf::from);
    root.join("runs").join(format!("{command}-seed{seed}"))
}

/// Resolved configuration and seed record of a run directory.
fn write_run_record(dir: &Path, cfg: &RunConfig, command: &str, streams: serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved"), cfg.to_text())?;
    let record = json!({
        "command": command,
        "seed": cfg.seed,
        "generator": "ChaCha8",
        "streams": streams,
    });
    fs::write(dir.join("seed.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn load_sequences(path: &Path) -> anyhow::Result<Vec<GaitSequence>> {
    let (_, seqs) = open_dataset(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(seqs)
}

fn dispatch(cmd: Command, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let name = command_name(&cmd);
    let takes_config = matches!(
        cmd,
        Command::TrainViewClassifier { .. }
            | Command::ClassifyViews { .. }
            | Command::Pretrain { .. }
            | Command::Finetune { .. }
            | Command::Heatmap { .. }
    );
    if !takes_config && !overrides.is_empty() {
        return Err(UsageError(format!("`{name}` does not accept configuration overrides")).into());
    }
    match cmd {
        Command::Prepare {
            input,
            output,
            layout,
            storage,
            no_normalize,
        } => {
            let opts = PackOptions {
                layout,
                storage,
                normalize: !no_normalize,
            };
            let manifest = pack_dataset(&input, &output, &opts)?;
            println!(
                "packed {} sequences into {} ({} skipped)",
                manifest.entries.len(),
                output.display(),
                manifest.skipped.len()
            );
        }
        Command::Synth {
            ids,
            views,
            conditions,
            seqs_per_cell,
            frames,
            seed,
            out,
        } => {
            let views = parse_list::<f64>(&views, "views")?;
            let conditions = parse_list::<Condition>(&conditions, "conditions")?;
            let spec = CorpusSpec::new(ids, views, &conditions, seqs_per_cell, frames, seed);
            let (_, seqs) = build_corpus(&spec)?;
            write_container(&out, &seqs)?;
            let labels_path = view_labels_path(&out);
            let labels: String = seqs
                .iter()
                .map(|s| format!("{}\t{}\n", s.sequence_id, s.view.as_deref().unwrap_or("")))
                .collect();
            fs::write(&labels_path, labels)?;
            println!("wrote {} sequences to {} (view labels in {})", seqs.len(), out.display(), labels_path.display());
        }
        Command::TrainViewClassifier { cfg, data, labels, out } => {
            let cfg = resolve(RunConfig::default(), &cfg, vec![], overrides)?;
            let labels = read_view_labels(&labels)?;
            let mut examples = Vec::new();
            for seq in load_sequences(&data)? {
                let Some(&angle) = labels.get(&seq.sequence_id) else { continue };
                let class = view_class(angle)?;
                for clip in view_clips(&seq, cfg.sampler.window) {
                    examples.push((build_view_input(&clip)?, class));
                }
            }
            if examples.is_empty() {
                bail!("no sequence in {} has a view label", data.display());
            }
            let (mut model, acc) = train_view_classifier(&examples, &cfg.view_train_config())?;
            model.checkpoint().save(&out)?;
            println!("trained on {} windows, training accuracy {:.2}%", examples.len(), 100.0 * acc);
        }
        Command::ClassifyViews { cfg, ckpt, data, out } => {
            let cfg = resolve(RunConfig::default(), &cfg, vec![], overrides)?;
            let mut model = ViewClassifier::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let mut stats = BTreeMap::new();
            for seq in load_sequences(&data)? {
                stats.insert(seq.sequence_id.clone(), classify_sequence(&mut model, &seq, cfg.sampler.window)?);
            }
            write_stats_table(&out, &stats)?;
            println!("wrote view statistics for {} sequences to {}", stats.len(), out.display());
        }
        Command::Pretrain {
            cfg,
            data,
            stats,
            out,
            no_spatial,
            no_intraseq,
            no_sampling,
            no_negatives,
            subset_frac,
        } => {
            let mut flags = Vec::new();
            for (off, key) in [
                (no_spatial, "pretrain.spatial"),
                (no_intraseq, "pretrain.intra_seq"),
                (no_sampling, "pretrain.sampling"),
                (no_negatives, "pretrain.negatives"),
            ] {
                if off {
                    flags.push((key.to_string(), "false".to_string()));
                }
            }
            if let Some(f) = subset_frac {
                flags.push(("pretrain.subset_frac".into(), f.to_string()));
            }
            let cfg = resolve(RunConfig::default(), &cfg, flags, overrides)?;
            let pcfg = cfg.pretrain_config();
            let stats = match (&stats, pcfg.sampling) {
                (Some(p), true) => Some(read_stats_table(p)?),
                (None, true) => {
                    return Err(UsageError("sampling augmentation needs `--stats` (or pass `--no-sampling`)".into()).into());
                }
                (_, false) => None,
            };
            let dir = out.unwrap_or_else(|| default_run_dir(name, cfg.seed));
            write_run_record(
                &dir,
                &cfg,
                name,
                json!({
                    "init": pretrain::INIT_STREAM,
                    "data": pretrain::DATA_STREAM,
                    "subset": pretrain::SUBSET_STREAM,
                }),
            )?;
            let outcome = run_pretraining(&pcfg, load_sequences(&data)?, stats.as_ref(), Some(&dir))?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "pre-trained {} steps, final loss {:.5}, emb_std {:.5}; run directory {}",
                    last.step,
                    last.loss,
                    last.emb_std,
                    dir.display()
                );
            }
        }
        Command::Finetune {
            cfg,
            init,
            data,
            dataset,
            subject_frac,
            out,
        } => {
            let flags = subject_frac
                .map(|f| vec![("finetune.subject_frac".to_string(), f.to_string())])
                .unwrap_or_default();
            let base = RunConfig::with_transfer_preset(dataset);
            let pretrained = if init == "random" {
                None
            } else {
                Some(Checkpoint::load(Path::new(&init)).with_context(|| format!("loading {init}"))?)
            };
            // Without an explicit model the pre-trained encoder shape wins.
            let mut cfg = resolve(base, &cfg, flags, overrides)?;
            if let Some(ck) = &pretrained {
                cfg.model = transfer::checkpoint_encoder_config(ck)?;
            }
            let tcfg = cfg.transfer_config();
            let dir = out.unwrap_or_else(|| default_run_dir(name, cfg.seed));
            write_run_record(
                &dir,
                &cfg,
                name,
                json!({ "init": transfer::INIT_STREAM, "data": transfer::DATA_STREAM }),
            )?;
            let seqs = load_sequences(&data)?;
            let outcome = match &pretrained {
                Some(ck) => finetune(&tcfg, ck, seqs, Some(&dir))?,
                None => train_from_scratch(&tcfg, seqs, Some(&dir))?,
            };
            if let Some(last) = outcome.metrics.last() {
                println!("fine-tuned {} steps, final loss {:.5}; run directory {}", last.step, last.loss, dir.display());
            }
        }
        Command::Evaluate {
            ckpt,
            data,
            protocol,
            out,
            save_embeddings,
        } => {
            let mut model = EmbeddingModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let set = extract_embeddings(&mut model, &load_sequences(&data)?)?;
            if let Some(path) = save_embeddings {
                set.save(&path)?;
            }
            let result = evaluate_protocol(&set, protocol)?;
            result.save(&out)?;
            println!("{} rank-1 {:.2}%", result.protocol, result.rank1);
            for (cond, acc) in &result.per_condition {
                println!("  {cond}: {acc:.2}%");
            }
        }
        Command::Heatmap { cfg, result, out } => {
            let cfg = resolve(RunConfig::default(), &cfg, vec![], overrides)?;
            let result = RetrievalResult::load(&result)?;
            let wanted = &cfg.eval.heatmap_condition;
            let matrix = if wanted.is_empty() {
                result.view_matrix.values().next()
            } else {
                result.view_matrix.get(wanted)
            }
            .ok_or_else(|| anyhow!("result has no cross-view matrix{}", if wanted.is_empty() { String::new() } else { format!(" for `{wanted}`") }))?;
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                fs::write(&out, matrix.to_csv())?;
            } else {
                matrix
                    .to_image(cfg.eval.heatmap_cell_px)
                    .save(&out)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            println!("wrote {}", out.display());
        }
        Command::HypothesisCheck {
            embeddings,
            labels,
            pi_radius,
            chain_len,
            out,
        } => {
            let points = read_vectors(&embeddings)?;
            let labels: Vec<String> = fs::read_to_string(&labels)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let report = hypothesis_check(&points, &labels, pi_radius, chain_len)?;
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{}", serde_json::to_string(&report["summary"])?);
        }
    }
    Ok(())
}

/// `<container>.views.tsv`, written by `synth` for `train-view-classifier`.
pub fn view_labels_path(container: &Path) -> PathBuf {
    let mut name = container.file_name().unwrap_or_default().to_os_string();
    name.push(".views.tsv");
    container.with_file_name(name)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| UsageError(format!("--{what}: `{s}`: {e}"))))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(UsageError(format!("--{what} is empty")).into());
    }
    Ok(items)
}

/// Embedding JSON (parts concatenated per sequence) or whitespace/comma
/// separated text rows.
fn read_vectors(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let set: EmbeddingSet = serde_json::from_str(&text)?;
        return Ok(set.records.iter().map(|r| r.embedding.iter().map(|&v| v as f64).collect()).collect());
    }
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            bail!("{}: rows have different lengths", path.display());
        }
    }
    Ok(rows)
}

/// Separability bounds, chain transitivity and nested-neighbourhood checks
/// over every point of the set.
pub fn hypothesis_check(points: &[Vec<f64>], labels: &[String], pi_radius: f64, chain_len: usize) -> anyhow::Result<serde_json::Value> {
    let report = bounds_report(points, labels, pi_radius, chain_len)?;
    let a = report.bounds.a;
    let (mut transitive, mut within_na, mut subset_holds) = (0usize, 0usize, 0usize);
    let mut worst_ratio = 0.0f64;
    for (i, x) in points.iter().enumerate() {
        // Chains move inside the point's own class, so every step is at most `a`.
        let same: Vec<Vec<f64>> = points.iter().zip(labels).filter(|(_, l)| *l == &labels[i]).map(|(p, _)| p.clone()).collect();
        let chain = build_chain(x, radius_sampler(&same, pi_radius), chain_len)?;
        let (lhs, rhs, ok) = verify_transitivity(&chain);
        transitive += ok as usize;
        within_na += (lhs <= chain_len as f64 * a + TOLERANCE) as usize;
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
        let near = |r: f64| -> Vec<usize> { (0..points.len()).filter(|&j| gaitlab_core::probe::euclid(x, &points[j]) <= r).collect() };
        let bound = verify_subset_bound(x, &near(pi_radius), &near(2.0 * pi_radius), points)?;
        subset_holds += bound.holds as usize;
    }
    let n = points.len();
    Ok(json!({
        "summary": {
            "points": n,
            "classes": report.classes,
            "a": a,
            "b": report.bounds.b,
            "chain_len": chain_len,
            "sufficient": report.sufficient,
            "separated": report.separated,
            "assumption_rate": report.assumption_rate,
            "transitivity_holds": transitive,
            "chain_within_n_a": within_na,
            "subset_bound_holds": subset_holds,
        },
        "bounds": report,
        "max_end_to_end_over_path": worst_ratio,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_clap_arguments() {
        let (rest, ov) = split_overrides(&strings(&["gaitlab", "pretrain", "--pretrain.lr", "0.01", "--data", "x", "--aug.p_flip=0.2"])).unwrap();
        assert_eq!(rest, strings(&["gaitlab", "pretrain", "--data", "x"]));
        assert_eq!(ov, vec![("pretrain.lr".into(), "0.01".into()), ("aug.p_flip".into(), "0.2".into())]);
        assert!(split_overrides(&strings(&["gaitlab", "pretrain", "--pretrain.lr"])).is_err());
        // Negative values are taken verbatim.
        let (_, ov) = split_overrides(&strings(&["gaitlab", "--pretrain.tau", "-1"])).unwrap();
        assert_eq!(ov[0].1, "-1");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["gaitlab"]), 2);
        assert_eq!(run(["gaitlab", "frobnicate"]), 2);
        assert_eq!(run(["gaitlab", "--help"]), 0);
        assert_eq!(run(["gaitlab", "synth", "--ids", "2", "--out", "/x", "--pretrain.lr", "1"]), 2);
    }

    #[test]
    fn resolve_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "pretrain.lr = 0.5\nseed = 3\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            seed: None,
        };
        let cfg = resolve(RunConfig::default(), &args, vec![], &[("pretrain.lr".into(), "0.01".into())]).unwrap();
        assert_eq!((cfg.pretrain.lr, cfg.seed), (0.01, 3));
        let err = resolve(RunConfig::default(), &args, vec![], &[("pretrain.tau".into(), "-1".into())]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn labels_path_sits_next_to_container() {
        assert_eq!(view_labels_path(Path::new("/a/b/c.gssb")), PathBuf::from("/a/b/c.gssb.views.tsv"));
    }
}
