mod config;
mod overlay;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sdtrack::encoder::{load_checkpoint, save_checkpoint, EncoderState, TrainingPair};
use sdtrack::io::{atomic_write, load_bundle, read_tracks, save_bundle, write_results, SequenceBundle, TrackRow};
use sdtrack::metrics::{evaluate, EvalReport};
use sdtrack::pipeline::{track_sequence, training_pairs};
use sdtrack::sim::generate_sequence;

use config::RunConfig;
use overlay::{id_color, Canvas};

#[derive(Debug, Parser)]
#[command(name = "sdtrack", version, about = "Multi-object tracking with depth-segmentation association")]
struct Cli {
    /// JSON run config; every key is optional.
    #[arg(long, global = true, env = "SDTRACK_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set association.max_age=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (replaces `seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sequence bundle with ground truth.
    Simulate(OutArgs),
    /// Train the depth-segmentation encoder on one or more bundles.
    TrainEncoder {
        #[arg(long = "bundle", required = true)]
        bundles: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Track a bundle and write MOTChallenge results plus a timing report.
    Track {
        #[arg(long)]
        bundle: PathBuf,
        /// Encoder checkpoint directory; needed when the depth-seg cue is on.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score tracker output against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw tracks over the depth maps of a bundle as PPM frames.
    RenderOverlay {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Track and evaluate bundles under several cue subsets.
    Ablate {
        #[arg(long = "bundle", required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subsets of `iou`, `emb`, `sd`; `iou` is mandatory.
        #[arg(long, default_value = "iou+emb,iou+emb+sd")]
        subsets: String,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match cli.command {
        Command::Simulate(o) => simulate(&cfg, &o.out),
        Command::TrainEncoder { bundles, out } => train_encoder(&cfg, &bundles, &out.out),
        Command::Track { bundle, checkpoint, out } => track(&cfg, &bundle, checkpoint.as_deref(), &out.out),
        Command::Eval { gt, pred, out } => eval(&cfg, &gt, &pred, &out.out),
        Command::RenderOverlay { bundle, tracks, out } => render_overlay(&cfg, &bundle, &tracks, &out.out),
        Command::Ablate { bundles, checkpoint, subsets, out } => {
            ablate(&cfg, &bundles, checkpoint.as_deref(), &subsets, &out.out)
        }
    }
}

/// Creates `out` and records the effective config in it.
fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    atomic_write(&out.join("config.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    Ok(atomic_write(path, bytes.as_ref())?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Builds a directory under a hidden sibling name and renames it into place,
/// replacing any previous version only after the new one is complete.
fn publish_dir(dest: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dest.file_name().context("output path has no file name")?.to_string_lossy().into_owned();
    let tmp = dest.with_file_name(format!(".{name}.partial"));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dest.exists() {
        fs::remove_dir_all(dest).with_context(|| format!("replacing {}", dest.display()))?;
    }
    fs::rename(&tmp, dest).with_context(|| format!("moving output into {}", dest.display()))?;
    Ok(())
}

fn load_encoder(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Option<EncoderState>> {
    match checkpoint {
        Some(dir) => Ok(Some(load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?)),
        None if cfg.association.cues.depth_seg => {
            bail!("the depth-seg cue needs --checkpoint (or --set association.cues.depth_seg=false)")
        }
        None => Ok(None),
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bundle = generate_sequence(&cfg.sim)?;
    prepare_out(cfg, out)?;
    publish_dir(&out.join("bundle"), |dir| Ok(save_bundle(&bundle, dir)?))?;
    println!(
        "wrote {} frames, {} detections to {}",
        bundle.frames.len(),
        bundle.num_detections(),
        out.join("bundle").display()
    );
    Ok(())
}

fn train_encoder(cfg: &RunConfig, bundles: &[PathBuf], out: &Path) -> Result<()> {
    let mut pairs: Vec<TrainingPair> = Vec::new();
    for b in bundles {
        let bundle = load_bundle(b).with_context(|| format!("loading bundle {}", b.display()))?;
        pairs.extend(training_pairs(&bundle, cfg.encoder.resolution, &cfg.fusion)?.into_iter().map(|p| p.pair));
    }
    ensure!(!pairs.is_empty(), "no training pairs: bundles need depth maps and backward masks");
    let mut enc = EncoderState::new(cfg.encoder.clone(), cfg.seed)?;
    let report = enc.train(&pairs, cfg.seed)?;
    prepare_out(cfg, out)?;
    publish_dir(&out.join("checkpoint"), |dir| Ok(save_checkpoint(&enc, dir)?))?;
    write_file(&out.join("loss.csv"), report.to_csv())?;
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!("{} pairs; recon loss {:.4} -> {:.4}", pairs.len(), first.recon, last.recon);
    }
    Ok(())
}

fn track(cfg: &RunConfig, bundle: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let encoder = load_encoder(cfg, checkpoint)?;
    let bundle = load_bundle(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    let result = track_sequence(&bundle, encoder.as_ref(), &cfg.association, &cfg.fusion)?;
    prepare_out(cfg, out)?;
    write_results(&result.rows, out.join("results.txt"))?;
    write_json(&out.join("timing.json"), &result.timing)?;
    println!(
        "{} rows over {} frames; association {:.1} fps, embedding {:.1} fps",
        result.rows.len(),
        result.timing.frames,
        result.timing.association_fps,
        result.timing.embedding_fps
    );
    Ok(())
}

fn eval(cfg: &RunConfig, gt: &Path, pred: &Path, out: &Path) -> Result<()> {
    let report = evaluate(&read_tracks(gt)?, &read_tracks(pred)?)?;
    prepare_out(cfg, out)?;
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn render_overlay(cfg: &RunConfig, bundle: &Path, tracks: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    let rows = read_tracks(tracks)?;
    let mut by_frame: BTreeMap<u32, Vec<&TrackRow>> = BTreeMap::new();
    for r in &rows {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let (w, h) = bundle.frame_size.unwrap_or_else(|| extent_of(&bundle, &rows));
    ensure!(w > 0 && h > 0, "cannot infer a frame size for the overlay");
    prepare_out(cfg, out)?;
    publish_dir(&out.join("frames"), |dir| {
        for f in &bundle.frames {
            let mut canvas = f.depth.as_ref().map_or_else(|| Canvas::new(w, h), Canvas::from_depth);
            for r in by_frame.get(&f.index).into_iter().flatten() {
                canvas.draw_box(&r.bbox(), id_color(r.id));
            }
            write_file(&dir.join(format!("{:06}.ppm", f.index)), canvas.to_ppm())?;
        }
        Ok(())
    })?;
    println!("wrote {} frames to {}", bundle.frames.len(), out.join("frames").display());
    Ok(())
}

fn extent_of(bundle: &SequenceBundle, rows: &[TrackRow]) -> (usize, usize) {
    let boxes =
        bundle.frames.iter().flat_map(|f| f.detections.iter().map(|d| d.bbox)).chain(rows.iter().map(TrackRow::bbox));
    boxes.fold((0, 0), |(w, h), b| (w.max(b.x2().ceil().max(0.0) as usize), h.max(b.y2().ceil().max(0.0) as usize)))
}

/// Headline metrics averaged over sequences; counts are summed.
#[derive(Debug, Serialize)]
struct Summary {
    hota: f64,
    det_a: f64,
    ass_a: f64,
    idf1: f64,
    mota: f64,
    idsw: u64,
}

#[derive(Debug, Serialize)]
struct AblationRow {
    subset: String,
    mean: Summary,
    per_sequence: Vec<EvalReport>,
}

fn parse_subset(s: &str) -> Result<(bool, bool)> {
    let (mut iou, mut emb, mut sd) = (false, false, false);
    for cue in s.split('+').map(str::trim) {
        match cue {
            "iou" => iou = true,
            "emb" => emb = true,
            "sd" => sd = true,
            other => bail!("unknown cue `{other}` in subset `{s}` (expected iou, emb, sd)"),
        }
    }
    ensure!(iou, "subset `{s}` must include iou");
    Ok((emb, sd))
}

fn summarize(reports: &[EvalReport]) -> Summary {
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Summary {
        hota: avg(|r| r.hota),
        det_a: avg(|r| r.det_a),
        ass_a: avg(|r| r.ass_a),
        idf1: avg(|r| r.idf1),
        mota: avg(|r| r.mota),
        idsw: reports.iter().map(|r| r.idsw).sum(),
    }
}

fn ablate(cfg: &RunConfig, bundles: &[PathBuf], checkpoint: Option<&Path>, subsets: &str, out: &Path) -> Result<()> {
    let subsets: Vec<(String, (bool, bool))> =
        subsets.split(',').map(|s| Ok((s.trim().to_string(), parse_subset(s.trim())?))).collect::<Result<_>>()?;
    let needs_sd = subsets.iter().any(|(_, (_, sd))| *sd);
    let encoder = match (checkpoint, needs_sd) {
        (Some(dir), _) => Some(load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?),
        (None, true) => bail!("a subset with `sd` needs --checkpoint"),
        (None, false) => None,
    };
    let loaded: Vec<SequenceBundle> = bundles
        .iter()
        .map(|b| load_bundle(b).with_context(|| format!("loading bundle {}", b.display())))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, (emb, sd)) in &subsets {
        let mut assoc = cfg.association.clone();
        assoc.cues.appearance = *emb;
        assoc.cues.depth_seg = *sd;
        let mut per_sequence = Vec::new();
        for (path, bundle) in bundles.iter().zip(&loaded) {
            let gt = bundle.ground_truth.as_ref().with_context(|| format!("{} has no gt.txt", path.display()))?;
            let result = track_sequence(bundle, encoder.as_ref(), &assoc, &cfg.fusion)?;
            per_sequence.push(evaluate(gt, &result.rows)?);
        }
        rows.push(AblationRow { subset: name.clone(), mean: summarize(&per_sequence), per_sequence });
    }
    let table = ablation_table(&rows);
    prepare_out(cfg, out)?;
    write_json(&out.join("ablation.json"), &rows)?;
    write_file(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// HOTA, AssA and IDF1 per subset, with deltas against the first subset.
fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "cues", "HOTA", "AssA", "IDF1", "dHOTA", "dAssA", "dIDF1"
    );
    let Some(base) = rows.first() else { return s };
    for r in rows {
        let (m, b) = (&r.mean, &base.mean);
        s.push_str(&format!(
            "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>+8.3} {:>+8.3} {:>+8.3}\n",
            r.subset,
            100.0 * m.hota,
            100.0 * m.ass_a,
            100.0 * m.idf1,
            100.0 * (m.hota - b.hota),
            100.0 * (m.ass_a - b.ass_a),
            100.0 * (m.idf1 - b.idf1)
        ));
    }
    s
}
