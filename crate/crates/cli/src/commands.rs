use std::fs;
use std::path::Path;

use serde::Serialize;
use stemgen_core::dataset::{synthesize_dataset, Dataset, Split, MANIFEST_FILE};
use stemgen_core::edit::EditPlan;
use stemgen_core::evaluate::{evaluate_task, EvalOptions, Task, TaskReport};
use stemgen_core::format::{decode_grid, read_grid, write_grid, GRID_MAGIC};
use stemgen_core::layout::{LayoutSpec, TokenGrid};
use stemgen_core::metrics::{preservation_rate, HarmonyGates};
use stemgen_core::model::{read_checkpoint_meta, read_model, AnyModel, Condition, CHECKPOINT_MAGIC};
use stemgen_core::rvq::{
    decode_codebooks, fit_codebooks, rvq_decode_stages, rvq_encode, write_codebooks, FitOptions, FrameSequence,
    CODEBOOK_MAGIC,
};
use stemgen_core::sampler::{edit, generate, DecodeParams, EditMode};
use stemgen_core::synth::{render_frames, StyleParams};
use stemgen_core::train::{evaluate_heldout, train, HeldoutReport, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE};
use stemgen_core::{Error, Result};

use crate::args::*;
use crate::run::{resolve_out, write_manifest};

macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("arguments serialize")
}

fn decode_params(a: &DecodeArgs) -> Result<DecodeParams> {
    let p = DecodeParams {
        temperature: a.temperature,
        top_k: a.top_k,
        cfg_scale: (!a.no_cfg).then_some(a.cfg_scale),
    };
    p.validate()?;
    Ok(p)
}

fn split_of(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

pub fn synth_data(a: &SynthDataArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "synth-data");
    let style = StyleParams {
        n_frames: a.frames,
        p_ct: a.p_ct,
        p_ob: a.p_ob,
        p_rest: a.p_rest,
        hats: a.hats,
        ..StyleParams::default()
    };
    let manifest = synthesize_dataset(&out, a.n, &style, a.seed)?;
    write_manifest(&out, "synth-data", to_json(a), Some(a.seed), &[MANIFEST_FILE])?;
    println!("wrote {} songs to {}", manifest.songs.len(), out.display());
    Ok(())
}

fn stem_frames(data: &Dataset, ids: &[usize], stem: &str) -> Result<FrameSequence> {
    let mut dim = 0;
    let mut values = Vec::new();
    let mut rate = data.layout().frame_rate_hz();
    for &id in ids {
        let song = data.song(id)?;
        let (_, frames) = render_frames(&song)
            .into_iter()
            .find(|(name, _)| name == stem)
            .ok_or_else(|| Error::UnknownStem(stem.to_string()))?;
        dim = frames.dim();
        rate = frames.frame_rate_hz();
        values.extend_from_slice(frames.as_slice());
    }
    Ok(FrameSequence::new(dim, values)?.with_frame_rate(rate))
}

#[derive(Serialize)]
struct CodecReport {
    stem: String,
    train_frames: usize,
    train_stage_mse: Vec<f64>,
    heldout_frames: usize,
    /// Validation MSE decoding with the first `s` stages, `s = 1..`.
    heldout_stage_mse: Vec<f64>,
    degenerate: bool,
}

pub fn train_codec(a: &TrainCodecArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "train-codec");
    let data = Dataset::load(&a.dataset)?;
    data.layout().stem_index(&a.stem)?;
    let train_frames = stem_frames(&data, &data.split(Split::Train), &a.stem)?;
    let opts = FitOptions {
        iterations: a.iterations,
        ..FitOptions::new(a.stages, a.codebook_size, a.seed)
    };
    let (set, fit) = fit_codebooks(&train_frames, opts)?;
    let val_ids = data.split(Split::Val);
    let (heldout_frames, heldout_stage_mse) = if val_ids.is_empty() {
        (0, Vec::new())
    } else {
        let val = stem_frames(&data, &val_ids, &a.stem)?;
        let codes = rvq_encode(&val, &set)?;
        let mse = (1..=set.n_stages())
            .map(|s| rvq_decode_stages(&codes, &set, s)?.mse(&val))
            .collect::<Result<_>>()?;
        (val.len(), mse)
    };
    fs::create_dir_all(&out)?;
    let file = format!("{}.rvq", a.stem);
    let report_file = format!("{}.fit.json", a.stem);
    write_codebooks(out.join(&file), &set)?;
    let report = CodecReport {
        stem: a.stem.clone(),
        train_frames: train_frames.len(),
        train_stage_mse: fit.stage_mse,
        heldout_frames,
        heldout_stage_mse,
        degenerate: fit.degenerate,
    };
    fs::write(out.join(&report_file), serde_json::to_vec_pretty(&report)?)?;
    write_manifest(&out, "train-codec", to_json(a), Some(a.seed), &[&file, &report_file])?;
    println!("stem {}: stage MSE (train) {:?}", a.stem, report.train_stage_mse);
    println!("stem {}: stage MSE (held-out) {:?}", a.stem, report.heldout_stage_mse);
    println!("codebooks written to {}", out.join(file).display());
    Ok(())
}

pub fn train_lm(a: &TrainLmArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "train-lm");
    let mut cfg = match (&a.config, a.toy) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, true) => TrainConfig::toy(),
        (None, false) => TrainConfig::default(),
    };
    if let Some(steps) = a.steps {
        cfg.optimization.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.optimization.seed = seed;
    }
    if let Some(p) = &a.precision {
        cfg.model.precision = p.parse().expect("validated by clap");
    }
    cfg.validate()?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let outcome = train(&cfg, &a.dataset, &out, a.resume.as_deref())?;
    fs::write(out.join("outcome.json"), serde_json::to_vec_pretty(&outcome)?)?;
    let config = serde_json::json!({"args": to_json(a), "train": to_json(&cfg)});
    write_manifest(
        &out,
        "train-lm",
        config,
        Some(cfg.optimization.seed),
        &["config.toml", METRICS_FILE, FINAL_CHECKPOINT, "outcome.json"],
    )?;
    println!(
        "trained {} steps in {:.1}s, last loss {}",
        outcome.steps,
        outcome.elapsed_s,
        outcome.last_loss.map_or("-".into(), |l| format!("{l:.4}"))
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

pub fn generate_cmd(a: &GenerateArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "generate");
    let params = decode_params(&a.decode)?;
    let model = read_model(&a.checkpoint)?;
    let cond = Condition::from_option(a.cond);
    let grid = with_model!(&model, m => generate(m, cond, a.frames, &params, a.seed))?;
    fs::create_dir_all(&out)?;
    write_grid(out.join("generated.tok"), &grid)?;
    write_manifest(&out, "generate", to_json(a), Some(a.seed), &["generated.tok"])?;
    println!(
        "generated {} frames: {}",
        grid.n_frames(),
        out.join("generated.tok").display()
    );
    Ok(())
}

pub fn edit_cmd(a: &EditArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "edit");
    let params = decode_params(&a.decode)?;
    let mode: EditMode = a.mode.parse()?;
    let model = read_model(&a.checkpoint)?;
    let source = read_grid(&a.input)?;
    if !source.layout().same_structure(&model.config().layout) {
        return Err(Error::LayoutMismatch(format!(
            "{} does not use the checkpoint's layout",
            a.input.display()
        )));
    }
    let plan = EditPlan::parse(&a.mask, source.layout(), a.downsample_factor)?;
    let cond = Condition::from_option(a.cond);
    let edited = with_model!(&model, m => edit(m, &source, &plan, cond, mode, &params, a.seed))?;
    fs::create_dir_all(&out)?;
    write_grid(out.join("edited.tok"), &edited)?;
    write_manifest(&out, "edit", to_json(a), Some(a.seed), &["edited.tok"])?;
    let rates = preservation_rate(&source, &edited, &plan)?;
    println!("plan {plan}; edited grid: {}", out.join("edited.tok").display());
    for (s, r) in rates.iter().enumerate() {
        if let Some(r) = r {
            println!("  stream {s}: preserved {r:.3}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    dataset: &'a Path,
    checkpoint: &'a Path,
    heldout: HeldoutReport,
    tasks: Vec<TaskReport>,
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let out = resolve_out(a.out.as_deref(), "evaluate");
    let tasks: Vec<Task> = if a.task.is_empty() {
        Task::ALL.to_vec()
    } else {
        a.task.iter().map(|t| t.parse()).collect::<Result<_>>()?
    };
    if !(a.tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let opts = EvalOptions {
        split: split_of(&a.split),
        n_songs: a.n_songs,
        frames: a.frames,
        mode: a.mode.parse()?,
        decode: decode_params(&a.decode)?,
        downsample_factor: a.downsample_factor,
        tolerance_s: a.tolerance,
        gates: HarmonyGates::default(),
        seed: a.seed,
    };
    let data = Dataset::load(&a.dataset)?;
    let model = read_model(&a.checkpoint)?;
    let cfg = model.config();
    let plain = data.grids.iter().map(TokenGrid::n_frames).min().unwrap_or(0);
    let plain = plain.min(cfg.max_frames.saturating_sub(cfg.layout.max_delay()));
    let heldout = with_model!(&model, m => evaluate_heldout(m, &data, opts.split, plain, a.n_songs))?;
    let reports = tasks
        .iter()
        .map(|&t| with_model!(&model, m => evaluate_task(m, &data, t, &opts)))
        .collect::<Result<Vec<_>>>()?;

    let gains = heldout.relative_gain();
    println!(
        "held-out cross-entropy ({:?}, {} songs)",
        heldout.split, heldout.n_songs
    );
    println!("{:<8} {:>8} {:>8} {:>8}", "stream", "ce", "unigram", "gain");
    for s in 0..heldout.stream_ce.len() {
        println!(
            "{:<8} {:>8.4} {:>8.4} {:>8.3}",
            s, heldout.stream_ce[s], heldout.unigram_entropy[s], gains[s]
        );
    }
    for r in &reports {
        println!("\n{}", r.table());
    }
    let report = EvaluationReport {
        dataset: &a.dataset,
        checkpoint: &a.checkpoint,
        heldout,
        tasks: reports,
    };
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    write_manifest(&out, "evaluate", to_json(a), Some(a.seed), &["report.json"])?;
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn describe_layout(layout: &LayoutSpec) -> String {
    let mut s = format!(
        "frame rate {} Hz, {} streams, max delay {}\n{:<7} {:<8} {:>5} {:>9} {:>5}\n",
        layout.frame_rate_hz(),
        layout.n_streams(),
        layout.max_delay(),
        "stream",
        "stem",
        "stage",
        "codebook",
        "delay"
    );
    for (i, info) in layout.streams().iter().enumerate() {
        s.push_str(&format!(
            "{:<7} {:<8} {:>5} {:>9} {:>5}\n",
            i,
            layout.stems()[info.stem].name,
            info.stage,
            info.codebook_size,
            info.delay
        ));
    }
    s
}

fn token_label(layout: &LayoutSpec, stream: usize, t: u32) -> String {
    use stemgen_core::Special;
    match layout.special_kind(stream, t) {
        Some(Special::PadDelay) => "PAD".into(),
        Some(Special::Mask) => "MSK".into(),
        Some(Special::Sep) => "SEP".into(),
        Some(Special::Bos) => "BOS".into(),
        None => t.to_string(),
    }
}

fn describe_grid(grid: &TokenGrid, frames: usize) -> String {
    let layout = grid.layout();
    let mut s = describe_layout(layout);
    let n = frames.min(grid.n_frames());
    s.push_str(&format!("\n{} frames; first {n}:\n", grid.n_frames()));
    for stream in 0..grid.n_streams() {
        let row: Vec<String> = grid.row(stream)[..n]
            .iter()
            .map(|&t| format!("{:>3}", token_label(layout, stream, t)))
            .collect();
        s.push_str(&format!("{:>3} | {}\n", stream, row.join(" ")));
    }
    s
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let path = &a.path;
    if path.is_dir() {
        let data = Dataset::load(path)?;
        let count = |s| data.split(s).len();
        let mut per_cond = vec![0usize; data.manifest.n_conditions];
        for e in &data.manifest.songs {
            per_cond[e.condition_id] += 1;
        }
        if a.json {
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "kind": "dataset", "songs": data.len(), "train": count(Split::Train),
                    "val": count(Split::Val), "test": count(Split::Test),
                    "conditions": per_cond, "layout": data.layout(), "seed": data.manifest.seed,
                }))?
            );
        } else {
            println!(
                "dataset: {} songs (train {}, val {}, test {}), seed {:?}",
                data.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                data.manifest.seed
            );
            println!("songs per condition: {per_cond:?}");
            print!("{}", describe_layout(data.layout()));
        }
        return Ok(());
    }
    let bytes = fs::read(path)?;
    if bytes.starts_with(GRID_MAGIC) {
        let grid = decode_grid(&bytes).map_err(|m| Error::format(path, m))?;
        if a.json {
            let rows: Vec<&[u32]> = (0..grid.n_streams()).map(|s| grid.row(s)).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "kind": "tokens", "layout": grid.layout(), "n_frames": grid.n_frames(), "streams": rows,
                }))?
            );
        } else {
            print!("{}", describe_grid(&grid, a.frames));
        }
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let meta = read_checkpoint_meta(path)?;
        if a.json {
            println!("{}", serde_json::to_string_pretty(&meta)?);
        } else {
            let m = &meta.model;
            println!(
                "checkpoint: step {}, {:?}, d_model {}, {} layers, {} heads, ff x{}, max {} frames, {} conditions",
                meta.step, meta.dtype, m.d_model, m.n_layers, m.n_heads, m.ff_mult, m.max_frames, m.n_conditions
            );
            println!("optimizer state: {}", meta.optimizer_step.is_some());
            print!("{}", describe_layout(&m.layout));
        }
    } else if bytes.starts_with(CODEBOOK_MAGIC) {
        let set = decode_codebooks(&bytes).map_err(|m| Error::format(path, m))?;
        if a.json {
            println!(
                "{}",
                serde_json::json!({"kind": "codebooks", "n_stages": set.n_stages(),
                                   "codebook_size": set.codebook_size(), "dim": set.dim()})
            );
        } else {
            println!(
                "codebooks: {} stages x {} codes, dim {}",
                set.n_stages(),
                set.codebook_size(),
                set.dim()
            );
        }
    } else {
        return Err(Error::format(
            path,
            "not a token file, checkpoint, codebook file or dataset",
        ));
    }
    Ok(())
}
