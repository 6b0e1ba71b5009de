use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::anyhow;
use canids::canio::{parse_frames, write_frames, CanFrame, FrameFormat, ParseMode, ParseOptions};
use canids::detect::{
    evaluate, score_windows, sweep as run_sweep, write_sweep_csv, DetectConfig, DetectionReport, SweepEntry,
    SweepRow, SweepSetting, Timing,
};
use canids::model::{load_checkpoint, save_checkpoint, CanBertModel, Checkpoint, ModelConfig};
use canids::traffic_sim::Scenario;
use canids::training::{fit, TrainConfig};
use canids::util::sha256_hex;
use canids::windowing::{
    read_shard, slide_windows, split_train_valid, tokenize, write_shard, IdVocabulary, Window,
};
use serde::Serialize;
use serde_json::json;

use crate::fail::{artifact, require_exists, usage, CliResult};
use crate::{
    AxisArg, BenchArgs, BuildWindowsArgs, DetectArgs, EvalArgs, IngestArgs, InputArgs, ScoreArgs, SimulateArgs,
    SweepArgs, TrainArgs,
};

const CREATED_BY: &str = concat!("canids ", env!("CARGO_PKG_VERSION"));

struct Capture {
    frames: Vec<CanFrame>,
    sha256: String,
}

fn load_frames(path: &Path, input: &InputArgs) -> CliResult<Capture> {
    require_exists(path)?;
    let bytes = std::fs::read(path)?;
    let options = ParseOptions {
        mode: if input.lenient { ParseMode::Lenient } else { ParseMode::Strict },
        address_width: input.width(),
        ..ParseOptions::default()
    };
    let outcome = parse_frames(bytes.as_slice(), input.format, &options)
        .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    if !outcome.errors.is_empty() {
        log::warn!("{}: skipped {} malformed rows", path.display(), outcome.errors.len());
    }
    log::info!("{}: {} frames", path.display(), outcome.frames.len());
    Ok(Capture {
        frames: outcome.frames,
        sha256: sha256_hex(&bytes),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let mut scenario = match &args.scenario {
        Some(path) => {
            require_exists(path)?;
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?
        }
        None => Scenario::default(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(factor) = args.scale {
        if !(factor > 0.0) {
            return Err(usage(anyhow!("--scale must be positive")));
        }
        scenario = scenario.scaled(factor);
    }
    let suite = scenario.build()?;
    std::fs::create_dir_all(&args.out)?;
    let ext = match args.format {
        FrameFormat::DatasetCsv => "csv",
        FrameFormat::Candump => "log",
    };
    let mut files = Vec::new();
    for (name, frames) in suite.streams() {
        let path = args.out.join(format!("{name}.{ext}"));
        let mut buf = Vec::new();
        write_frames(frames, args.format, &mut buf)?;
        std::fs::write(&path, &buf)?;
        let attacks = frames.iter().filter(|f| f.label.is_attack()).count();
        log::info!("{name}: {} frames, {attacks} injected", frames.len());
        files.push(json!({
            "name": name,
            "file": path.file_name().map(|n| n.to_string_lossy()),
            "frames": frames.len(),
            "attack_frames": attacks,
            "sha256": sha256_hex(&buf),
        }));
    }
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "created_by": CREATED_BY,
            "scenario": scenario,
            "profiles": suite.profiles,
            "format": args.format,
            "files": files,
        }),
    )
}

pub fn ingest(args: IngestArgs) -> CliResult<()> {
    require_exists(&args.input)?;
    let bytes = std::fs::read(&args.input)?;
    let options = ParseOptions {
        mode: if args.input_args.lenient { ParseMode::Lenient } else { ParseMode::Strict },
        address_width: args.input_args.width(),
        ..ParseOptions::default()
    };
    let outcome = parse_frames(bytes.as_slice(), args.input_args.format, &options)
        .map_err(|e| usage(anyhow!("{}: {e}", args.input.display())))?;
    for e in outcome.errors.iter().take(10) {
        log::warn!("{e}");
    }
    write_frames(&outcome.frames, FrameFormat::DatasetCsv, create(&args.out)?)?;
    log::info!(
        "{} frames, {} rejected rows, {} out-of-order",
        outcome.frames.len(),
        outcome.errors.len(),
        outcome.monotonicity_warnings
    );
    write_json(
        &args.out.with_extension("meta.json"),
        &json!({
            "created_by": CREATED_BY,
            "source": args.input,
            "source_sha256": sha256_hex(&bytes),
            "format": args.input_args.format,
            "meta": outcome.meta,
            "rejected_rows": outcome.errors.len(),
            "first_errors": outcome.errors.iter().take(10).map(|e| e.to_string()).collect::<Vec<_>>(),
            "monotonicity_warnings": outcome.monotonicity_warnings,
        }),
    )
}

pub fn build_windows(args: BuildWindowsArgs) -> CliResult<()> {
    let capture = load_frames(&args.data, &args.input_args)?;
    let vocab = match &args.vocab {
        Some(path) => {
            require_exists(path)?;
            IdVocabulary::load(path)?
        }
        None => {
            let vocab = IdVocabulary::build(&capture.frames)?;
            vocab.save(&args.out.with_extension("vocab.json"))?;
            vocab
        }
    };
    let stream = tokenize(&capture.frames, &vocab);
    let windows = slide_windows(&stream, args.window, args.stride)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let manifest = write_shard(&args.out, &windows, args.stride, &vocab)?;
    log::info!(
        "{} windows (T={}, stride {}), {} abnormal",
        manifest.count,
        manifest.window,
        manifest.stride,
        windows.iter().filter(|w| w.is_abnormal()).count()
    );
    Ok(())
}

/// Reads a shard and checks it against the vocabulary and expected T.
fn load_shard(base: &Path, vocab: &IdVocabulary, window: Option<usize>) -> CliResult<Vec<Window>> {
    require_exists(&base.with_extension("json"))?;
    let (manifest, windows) = read_shard(base)?;
    if manifest.vocab_hash != vocab.hash() {
        return Err(artifact(anyhow!("{}: vocabulary hash mismatch", base.display())));
    }
    if let Some(t) = window.filter(|&t| t != manifest.window) {
        return Err(artifact(anyhow!("{}: shard has T={}, expected {t}", base.display(), manifest.window)));
    }
    Ok(windows)
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let (vocab, windows, source) = match (&args.data, &args.windows) {
        (Some(data), _) => {
            let capture = load_frames(data, &args.input_args)?;
            let vocab = IdVocabulary::build(&capture.frames)?;
            let stream = tokenize(&capture.frames, &vocab);
            let windows = slide_windows(&stream, args.window, args.stride)?;
            (vocab, windows, json!({"data": data, "sha256": capture.sha256, "stride": args.stride}))
        }
        (None, Some(base)) => {
            let vocab_path = args.vocab.as_ref().expect("clap requires --vocab");
            require_exists(vocab_path)?;
            let vocab = IdVocabulary::load(vocab_path)?;
            let windows = load_shard(base, &vocab, Some(args.window))?;
            (vocab, windows, json!({"windows": base}))
        }
        (None, None) => unreachable!("clap requires --data or --windows"),
    };
    let (train, valid) = split_train_valid(windows, args.valid_fraction)?;
    let config = ModelConfig {
        layers: args.layers,
        d_model: args.d_model,
        d_ff: args.d_ff,
        heads: args.heads,
        dropout: args.dropout,
        ..ModelConfig::new(args.window, vocab.len())
    };
    let train_config = TrainConfig {
        mask_ratio: args.mask_ratio,
        batch_size: args.batch_size,
        lr: args.lr,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed: args.seed,
        valid_fraction: args.valid_fraction,
        ..TrainConfig::default()
    };
    let mut model = CanBertModel::new(config, args.seed)?;
    log::info!(
        "training {} parameters on {} windows ({} validation), M = {}",
        model.parameter_count(),
        train.len(),
        valid.len(),
        vocab.len()
    );
    let report = fit(&mut model, &train, &valid, &train_config)?;
    let metadata = json!({
        "train_config": train_config,
        "source": source,
        "best_epoch": report.best_epoch,
        "best_valid_loss": report.best_valid_loss,
    });
    let manifest = save_checkpoint(&args.out, &model, &vocab, metadata)?;
    write_json(&args.out.join("training_report.json"), &report)?;
    log::info!(
        "best epoch {} (valid loss {:.4}); stopped after {} epochs ({:?}); params {}",
        report.best_epoch,
        report.best_valid_loss,
        report.stopped_epoch,
        report.stop_reason,
        &manifest.blob_sha256[..12]
    );
    Ok(())
}

fn open_checkpoint(dir: &Path, detect: &DetectArgs) -> CliResult<Checkpoint> {
    require_exists(&dir.join("manifest.json"))?;
    let ck = load_checkpoint(dir)?;
    if let Some(t) = detect.window.filter(|&t| t != ck.model.config().window) {
        return Err(artifact(anyhow!(
            "checkpoint has T={}, but --T {t} was requested",
            ck.model.config().window
        )));
    }
    Ok(ck)
}

fn capture_windows(ck: &Checkpoint, frames: &[CanFrame], stride: usize) -> CliResult<Vec<Window>> {
    let stream = tokenize(frames, &ck.vocab);
    Ok(slide_windows(&stream, ck.model.config().window, stride)?)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    created_by: &'static str,
    checkpoint: &'a Path,
    checkpoint_sha256: &'a str,
    source: &'a Path,
    source_sha256: &'a str,
    stride: usize,
    report: &'a DetectionReport,
}

pub fn score(args: ScoreArgs) -> CliResult<()> {
    let ck = open_checkpoint(&args.checkpoint, &args.detect)?;
    let (windows, source, sha) = match (&args.data, &args.windows) {
        (Some(data), _) => {
            let capture = load_frames(data, &args.input_args)?;
            (capture_windows(&ck, &capture.frames, args.detect.stride)?, data.clone(), capture.sha256)
        }
        (None, Some(base)) => {
            let windows = load_shard(base, &ck.vocab, Some(ck.model.config().window))?;
            let blob = std::fs::read(base.with_extension("bin"))?;
            (windows, base.clone(), sha256_hex(&blob))
        }
        (None, None) => unreachable!("clap requires --data or --windows"),
    };
    let report = evaluate(&ck.model, &ck.vocab, &windows, &args.detect.config())?;
    report.write_scores_csv(create(&args.out)?)?;
    let manifest = ReportFile {
        created_by: CREATED_BY,
        checkpoint: &args.checkpoint,
        checkpoint_sha256: &ck.manifest.blob_sha256,
        source: &source,
        source_sha256: &sha,
        stride: args.detect.stride,
        report: &DetectionReport {
            scores: Vec::new(),
            ..report.clone()
        },
    };
    write_json(&args.out.with_extension("json"), &manifest)?;
    log::info!(
        "{} windows, {} flagged, mean {:.3} ms/window",
        report.windows,
        report.confusion.tp + report.confusion.fp,
        report.timing.mean_ms
    );
    Ok(())
}

fn summary_row(name: &str, window: usize, report: &DetectionReport) -> SweepRow {
    SweepRow {
        attack: name.to_string(),
        setting: SweepSetting::Window(window),
        precision: report.precision,
        recall: report.recall,
        f1: report.f1,
        mean_latency_ms: report.timing.mean_ms,
    }
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let ck = open_checkpoint(&args.checkpoint, &args.detect)?;
    for path in &args.data {
        require_exists(path)?;
    }
    std::fs::create_dir_all(&args.out)?;
    let cfg = args.detect.config();
    let t = ck.model.config().window;
    let mut rows = Vec::new();
    for path in &args.data {
        let capture = load_frames(path, &args.input_args)?;
        let windows = capture_windows(&ck, &capture.frames, args.detect.stride)?;
        let report = evaluate(&ck.model, &ck.vocab, &windows, &cfg)?;
        let name = file_stem(path);
        write_json(
            &args.out.join(format!("{name}.report.json")),
            &ReportFile {
                created_by: CREATED_BY,
                checkpoint: &args.checkpoint,
                checkpoint_sha256: &ck.manifest.blob_sha256,
                source: path,
                source_sha256: &capture.sha256,
                stride: args.detect.stride,
                report: &report,
            },
        )?;
        report.write_scores_csv(create(&args.out.join(format!("{name}.scores.csv")))?)?;
        log::info!(
            "{name}: P {:.4} R {:.4} F1 {:.4} ({} windows, {:.3} ms/window)",
            report.precision,
            report.recall,
            report.f1,
            report.windows,
            report.timing.mean_ms
        );
        rows.push(summary_row(&name, t, &report));
    }
    write_sweep_csv(&rows, create(&args.out.join("summary.csv"))?)?;
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let mut checkpoints = Vec::new();
    for dir in &args.checkpoints {
        checkpoints.push(open_checkpoint(dir, &DetectArgs { window: None, ..args.detect.clone() })?);
    }
    let mut captures = Vec::new();
    for path in &args.data {
        captures.push((file_stem(path), load_frames(path, &args.input_args)?.frames));
    }
    let entries: Vec<SweepEntry<'_>> = checkpoints
        .iter()
        .map(|ck| {
            let config = ck.model.config();
            let mut detect = args.detect.config();
            let setting = match args.axis {
                AxisArg::Window => SweepSetting::Window(config.window),
                AxisArg::MaskHeads => {
                    // Detection masks at the ratio the checkpoint was trained with.
                    if let Some(m) = ck.manifest.metadata["train_config"]["mask_ratio"].as_f64() {
                        detect.mask_ratio = m;
                    }
                    SweepSetting::MaskHeads {
                        mask_ratio: detect.mask_ratio,
                        heads: config.heads,
                    }
                }
            };
            SweepEntry {
                setting,
                model: &ck.model,
                vocab: &ck.vocab,
                detect,
            }
        })
        .collect();
    let names: Vec<&str> = captures.iter().map(|(n, _)| n.as_str()).collect();
    let stride = args.detect.stride;
    let rows = run_sweep(&entries, &names, |name, vocab, window| {
        let frames = &captures.iter().find(|(n, _)| n == name).expect("known dataset").1;
        Ok(slide_windows(&tokenize(frames, vocab), window, stride)?)
    })?;
    write_sweep_csv(&rows, create(&args.out)?)?;
    for r in &rows {
        log::info!("{} {:?}: F1 {:.4}", r.attack, r.setting, r.f1);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    #[serde(rename = "T")]
    window: usize,
    parameter_count: usize,
    samples: usize,
    batch_size: usize,
    #[serde(flatten)]
    timing: Timing,
}

/// Soft per-window budget at T = 32.
const LATENCY_BUDGET_MS: f64 = 25.0;

pub fn bench(args: BenchArgs) -> CliResult<()> {
    let (base, vocab) = match &args.checkpoint {
        Some(dir) => {
            require_exists(&dir.join("manifest.json"))?;
            let ck = load_checkpoint(dir)?;
            (ck.model.config().clone(), ck.vocab)
        }
        None => {
            if args.vocab_size == 0 {
                return Err(usage(anyhow!("--vocab-size must be positive")));
            }
            let vocab = IdVocabulary::from_ids(0..args.vocab_size as u32)?;
            (ModelConfig::new(32, vocab.len()), vocab)
        }
    };
    if args.samples == 0 {
        return Err(usage(anyhow!("--samples must be positive")));
    }
    let m = vocab.len() as u32;
    let mut rows = Vec::new();
    for &t in &args.windows {
        let config = ModelConfig { window: t, ..base.clone() };
        let model = CanBertModel::new(config, args.seed)?;
        let windows: Vec<Window> = (0..args.samples)
            .map(|i| {
                let tokens = (0..t).map(|j| ((i * 31 + j * 7) as u32) % m).collect();
                Window::new(tokens, vec![0; t], i)
            })
            .collect();
        let detect = DetectConfig {
            batch_size: args.batch_size,
            seed: args.seed,
            ..DetectConfig::default()
        };
        // One untimed window warms caches and the thread pool.
        score_windows(&model, &vocab, &windows[..1], &detect)?;
        let (_, seconds) = score_windows(&model, &vocab, &windows, &detect)?;
        let timing = Timing::from_seconds(&seconds);
        eprintln!(
            "T={t:<4} params {:>9}  mean {:>8.3} ms  p95 {:>8.3} ms",
            model.parameter_count(),
            timing.mean_ms,
            timing.p95_ms
        );
        if t == 32 && timing.mean_ms > LATENCY_BUDGET_MS {
            log::warn!(
                "mean latency {:.2} ms/window at T=32 exceeds the {LATENCY_BUDGET_MS} ms soft budget",
                timing.mean_ms
            );
        }
        rows.push(BenchRow {
            window: t,
            parameter_count: model.parameter_count(),
            samples: args.samples,
            batch_size: args.batch_size,
            timing,
        });
    }
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "created_by": CREATED_BY,
                "model": base,
                "vocab_size": vocab.len(),
                "threads": rayon::current_num_threads(),
                "rows": rows,
            }),
        )?;
    }
    Ok(())
}
