//! Acceptance run: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Trains the toy model once (a few minutes on one core)
//! and reuses it for the editing criteria.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemgen_core::dataset::{synthesize_dataset, synthesize_songs, Dataset, Split};
use stemgen_core::edit::{downsample_grid, sample_edit_plan, EditPlan, ModelSequence};
use stemgen_core::evaluate::{bar_chord_agreement, grid_beat_f_measure, grid_harmonic_match};
use stemgen_core::metrics::{
    beat_f_measure, harmonic_match, preservation_rate, random_bass_baseline, random_drum_baseline, ChordFrame,
    HarmonyGates, PitchFrame, SILENT_DB,
};
use stemgen_core::model::{cross_entropy, read_checkpoint, Condition, Model, ModelConfig, ModelInput};
use stemgen_core::rvq::{fit_codebooks, rvq_decode_stages, rvq_encode, FitOptions, FrameSequence};
use stemgen_core::sampler::{edit, DecodeParams, EditMode};
use stemgen_core::synth::{render_frames, symbolic_detokenize, symbolic_layout, Chord, StyleParams};
use stemgen_core::train::{evaluate_heldout, train, TrainConfig, METRICS_FILE};
use stemgen_core::{apply_delay, make_layout, remove_delay, DelayRule, LayoutSpec, StemSpec, TokenGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_layout(rng: &mut ChaCha8Rng) -> LayoutSpec {
    let n_streams = rng.random_range(1..=6);
    let mut stems = Vec::new();
    let mut left = n_streams;
    while left > 0 {
        let k = rng.random_range(1..=left);
        let sizes = (0..k).map(|_| rng.random_range(2..=64)).collect();
        stems.push(StemSpec::new(format!("stem{}", stems.len()), sizes));
        left -= k;
    }
    let delays = (0..n_streams).map(|_| rng.random_range(0..=4)).collect();
    make_layout(stems, 50.0, DelayRule::Explicit(delays)).unwrap()
}

fn random_grid(layout: &LayoutSpec, n_frames: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    let mut g = TokenGrid::filled(layout.clone(), n_frames, 0);
    for s in 0..layout.n_streams() {
        let cb = layout.codebook_size(s);
        for v in g.row_mut(s) {
            *v = rng.random_range(0..cb);
        }
    }
    g
}

fn delay_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for _ in 0..1000 {
        let layout = random_layout(&mut rng);
        let n = rng.random_range(1..=64);
        let g = random_grid(&layout, n, &mut rng);
        let delayed = apply_delay(&g);
        if delayed.n_frames() != n + layout.max_delay() || remove_delay(&delayed).ok().as_ref() != Some(&g) {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 10.0,
        format!("1000 grids, {failures} mismatches, {secs:.2}s"),
    )
}

fn mask_plan_distribution() -> Outcome {
    let layout = LayoutSpec::audio_default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let (mut one, mut single) = (0usize, [0usize; 3]);
    let (mut other_masked, mut suffix) = (0usize, [0usize; 4]);
    for _ in 0..n {
        let plan = sample_edit_plan(&layout, 5, &mut rng);
        let masks = plan.masks();
        if masks.len() == 1 {
            one += 1;
            single[layout.stem_index(&masks[0].stem).unwrap()] += 1;
        }
        if let Some(m) = masks.iter().find(|m| m.stem == "other") {
            other_masked += 1;
            suffix[m.first_stage - 1] += 1;
        }
    }
    let p_one = one as f64 / n as f64;
    let p_single: Vec<f64> = single.iter().map(|&c| c as f64 / n as f64).collect();
    let p_suffix: Vec<f64> = suffix.iter().map(|&c| c as f64 / other_masked as f64).collect();
    let pass = (p_one - 0.5).abs() <= 0.01
        && p_single.iter().all(|p| (p - 1.0 / 6.0).abs() <= 0.01)
        && p_suffix.iter().all(|p| (p - 0.25).abs() <= 0.02);
    outcome(
        pass,
        format!("P(1 stem) {p_one:.4}; single {p_single:.4?}; other suffix from stage 1..4 {p_suffix:.4?}"),
    )
}

fn full_scale_shapes() -> Outcome {
    let layout = LayoutSpec::audio_default();
    let g = TokenGrid::filled(layout.clone(), 1250, 0);
    let prefix = downsample_grid(&g, 5).unwrap().n_frames();
    let pass = prefix == 250 && layout.n_streams() == 6 && layout.delays() == [0, 0, 0, 1, 2, 3];
    outcome(
        pass,
        format!(
            "prefix frames {prefix}, streams {}, delays {:?}",
            layout.n_streams(),
            layout.delays()
        ),
    )
}

fn gradient_check() -> Outcome {
    let layout = symbolic_layout(8.0);
    let mut cfg = ModelConfig::new(layout.clone(), 6);
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ff_mult = 2;
    cfg.max_frames = 32;
    cfg.zero_init_heads = false;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = Model::<f64>::new(cfg, &mut rng).unwrap();
    let grid = random_grid(&layout, 12, &mut rng);
    let seq = ModelSequence::plain(&grid);
    let input_cond = Condition::Id(2);
    let loss_of = |m: &Model<f64>| {
        let logits = m.forward(&ModelInput::from_sequence(&seq, input_cond)).unwrap();
        let (l, _) = cross_entropy(&logits, seq.grid.grid(), &seq.loss_mask, None).unwrap();
        l.sum / l.count as f64
    };
    let fwd = model
        .forward_train(&ModelInput::from_sequence(&seq, input_cond))
        .unwrap();
    let scale = 1.0 / seq.n_loss_cells() as f64;
    let (_, d) = cross_entropy(&fwd.logits, seq.grid.grid(), &seq.loss_mask, Some(scale)).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&fwd, &d.unwrap(), &mut grads);
    let flat: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();

    let (mut checked, mut worst) = (0, 0.0f64);
    let h = 1e-5;
    while checked < 40 {
        let ti = rng.random_range(0..flat.len());
        let idx = rng.random_range(0..flat[ti].len());
        let analytic = flat[ti][idx];
        let nudge = |m: &mut Model<f64>, delta: f64| m.params.tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] += delta;
        nudge(&mut model, h);
        let up = loss_of(&model);
        nudge(&mut model, -2.0 * h);
        let down = loss_of(&model);
        nudge(&mut model, h);
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-6 {
            continue; // unused embedding row: both sides zero
        }
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    }
    outcome(
        worst <= 1e-3,
        format!("{checked} parameters, worst relative error {worst:.2e}"),
    )
}

/// Toy-schedule training on 10k synthetic songs; shared by the learning
/// and editing criteria.
fn train_toy(root: &Path) -> (Dataset, Model<f32>, Outcome) {
    let data_dir = root.join("data");
    let start = Instant::now();
    synthesize_dataset(&data_dir, 10_000, &StyleParams::default(), 0).unwrap();
    let data = Dataset::load(&data_dir).unwrap();
    let cfg = TrainConfig::toy();
    let out = root.join("run");
    let result = train(&cfg, &data_dir, &out, None).unwrap();
    let model: Model<f32> = read_checkpoint(&result.checkpoint).unwrap().model;
    let train_secs = start.elapsed().as_secs_f64();

    let log = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let finite = log.lines().all(|l| {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        v.get("loss").is_none_or(|x| x.as_f64().is_some_and(f64::is_finite))
    });
    let report = evaluate_heldout(&model, &data, Split::Test, 48, None).unwrap();
    let gains = report.relative_gain();
    let pass = finite && gains.iter().all(|&g| g >= 0.20) && train_secs <= 30.0 * 60.0;
    let detail = format!(
        "{} steps in {train_secs:.0}s; CE {:.3?} vs unigram {:.3?}; gain {:.3?}; finite log {finite}",
        result.steps, report.stream_ce, report.unigram_entropy, gains
    );
    (data, model, outcome(pass, detail))
}

fn forced_preservation(data: &Dataset, model: &Model<f32>) -> Outcome {
    let ids = data.split(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = DecodeParams::default();
    let (mut runs, mut imperfect) = (0, 0);
    for k in 0..100u64 {
        let id = ids[rng.random_range(0..ids.len())];
        let src = &data.grids[id];
        let plan = sample_edit_plan(src.layout(), 5, &mut rng);
        let cond = Condition::Id(data.condition(id));
        let out = edit(model, src, &plan, cond, EditMode::Forced, &params, k).unwrap();
        let rates = preservation_rate(src, &out, &plan).unwrap();
        if rates.iter().flatten().any(|&r| r != 1.0) {
            imperfect += 1;
        }
        runs += 1;
    }
    outcome(
        imperfect == 0,
        format!("{runs} random plans, {imperfect} with an unmasked stream changed"),
    )
}

fn edit_stem(data: &Dataset, model: &Model<f32>, stem: &str, id: usize, seed: u64) -> TokenGrid {
    let src = &data.grids[id];
    let plan = EditPlan::whole_stems(&[stem], 5).unwrap();
    let cond = Condition::Id(data.condition(id));
    edit(
        model,
        src,
        &plan,
        cond,
        EditMode::Forced,
        &DecodeParams::default(),
        seed,
    )
    .unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cross_stem_harmony(data: &Dataset, model: &Model<f32>) -> Outcome {
    let ids: Vec<usize> = data.split(Split::Test).into_iter().take(100).collect();
    let gates = HarmonyGates::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut edited, mut random) = (Vec::new(), Vec::new());
    for (k, &id) in ids.iter().enumerate() {
        let out = edit_stem(data, model, "bass", id, k as u64);
        edited.extend(grid_harmonic_match(&out, gates).unwrap());
        for _ in 0..10 {
            let base = random_bass_baseline(&data.grids[id], &mut rng);
            random.extend(grid_harmonic_match(&base, gates).unwrap());
        }
    }
    let (h, r) = (mean(&edited), mean(&random));
    let pass = h >= 0.80 && (r - 0.25).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "regenerated bass HAR {h:.3} over {} songs; random bass {r:.3}",
            edited.len()
        ),
    )
}

fn cross_stem_rhythm(data: &Dataset, model: &Model<f32>) -> Outcome {
    let ids: Vec<usize> = data.split(Split::Test).into_iter().take(100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut edited, mut random) = (Vec::new(), Vec::new());
    for (k, &id) in ids.iter().enumerate() {
        let song = data.song(id).unwrap();
        let out = edit_stem(data, model, "drums", id, k as u64);
        edited.push(grid_beat_f_measure(&out, &song, 0.07).unwrap());
        for _ in 0..10 {
            let base = random_drum_baseline(&data.grids[id], &mut rng);
            random.push(grid_beat_f_measure(&base, &song, 0.07).unwrap());
        }
    }
    let (f, r) = (mean(&edited), mean(&random));
    outcome(
        f >= 0.80 && r <= 0.30,
        format!(
            "regenerated drums BEAT {f:.3} over {} songs; random drums {r:.3}",
            edited.len()
        ),
    )
}

fn residual_detail(data: &Dataset, model: &Model<f32>) -> Outcome {
    let ids: Vec<usize> = data.split(Split::Test).into_iter().take(100).collect();
    let (mut kept, mut changed, mut bars, mut bars_ok) = (0, 0, 0usize, 0.0f64);
    for (k, &id) in ids.iter().enumerate() {
        let src = &data.grids[id];
        let plan = EditPlan::parse(&["other:2-4"], src.layout(), 5).unwrap();
        let cond = Condition::Id(data.condition(id));
        let out = edit(
            model,
            src,
            &plan,
            cond,
            EditMode::Forced,
            &DecodeParams::default(),
            k as u64,
        )
        .unwrap();
        kept += (out.row(2) == src.row(2)) as usize;
        changed += (3..6).any(|s| out.row(s) != src.row(s)) as usize;
        let song = data.song(id).unwrap();
        let n_bars = song.chords.len();
        let detok = symbolic_detokenize(&out).unwrap();
        bars_ok += bar_chord_agreement(&song, &detok.song, src.n_frames()).unwrap_or(0.0) * n_bars as f64;
        bars += n_bars;
    }
    let n = ids.len();
    let agreement = bars_ok / bars as f64;
    let pass = kept == n && changed as f64 >= 0.95 * n as f64 && agreement >= 0.90;
    outcome(
        pass,
        format!("other1 kept {kept}/{n}; stages 2-4 changed {changed}/{n}; chords recovered in {agreement:.3} of {bars} bars"),
    )
}

fn rvq_monotonicity() -> Outcome {
    let frames_of = |seed: u64, n: usize| {
        let songs = synthesize_songs(n, &StyleParams::default(), seed).unwrap();
        let mut data = Vec::new();
        let mut dim = 0;
        for song in &songs {
            let (_, f) = render_frames(song).into_iter().find(|(s, _)| s == "other").unwrap();
            dim = f.dim();
            data.extend_from_slice(f.as_slice());
        }
        FrameSequence::new(dim, data).unwrap()
    };
    let heldout = frames_of(999, 40);
    let mut violations = 0;
    let mut example = Vec::new();
    for k in 0..10u64 {
        let train = frames_of(100 + k, 60);
        let (set, _) = fit_codebooks(&train, FitOptions::new(4, 16, k)).unwrap();
        let codes = rvq_encode(&heldout, &set).unwrap();
        let mse: Vec<f64> = (1..=4)
            .map(|s| rvq_decode_stages(&codes, &set, s).unwrap().mse(&heldout).unwrap())
            .collect();
        violations += mse.windows(2).filter(|w| w[1] > w[0]).count();
        if k == 0 {
            example = mse;
        }
    }
    outcome(
        violations == 0,
        format!("10 codebook sets, {violations} increases; first set MSE {example:.4?}"),
    )
}

fn metric_oracles() -> Outcome {
    let f = |r: &[f64], e: &[f64]| beat_f_measure(r, e, 0.07).unwrap().f_measure;
    let beat = [
        f(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) == 1.0,
        f(&[1.0, 2.0, 3.0], &[]) == 0.0,
        f(&[1.0, 2.0, 3.0], &[1.05, 2.2, 3.0]) == 2.0 / 3.0,
    ];

    let active = |pc: u8| PitchFrame {
        pitch_class: Some(pc),
        confidence: 1.0,
        loudness_db: 0.0,
    };
    let chord = |c: Chord| ChordFrame::new(&c.pitch_classes(), 0.0);
    let gates = HarmonyGates::default();
    let progression: Vec<Chord> = (0..48).map(|i| Chord::from_id((i / 4 % 24) as u32).unwrap()).collect();
    // Bass on every chord's root.
    let roots: Vec<PitchFrame> = progression.iter().map(|c| active(c.root)).collect();
    let chords: Vec<ChordFrame> = progression.iter().map(|&c| chord(c)).collect();
    let root_ratio = harmonic_match(&roots, &chords, gates).unwrap();
    // Every pitch class once against each triad: exactly 3 of 12.
    let c_major = Chord::from_id(0).unwrap();
    let sweep: Vec<PitchFrame> = (0..12).map(active).collect();
    let triads = vec![chord(c_major); 12];
    let sweep_ratio = harmonic_match(&sweep, &triads, gates).unwrap();
    // All bass below the loudness gate.
    let quiet: Vec<PitchFrame> = (0..12)
        .map(|pc| PitchFrame {
            loudness_db: SILENT_DB,
            ..active(pc)
        })
        .collect();
    let gated = harmonic_match(&quiet, &triads, gates).unwrap();
    let har = [root_ratio == Some(1.0), sweep_ratio == Some(0.25), gated.is_none()];
    outcome(
        beat.iter().chain(&har).all(|&b| b),
        format!("beat examples {beat:?}; harmony examples {har:?} (root {root_ratio:?}, sweep {sweep_ratio:?}, gated {gated:?})"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "delay round trip", delay_round_trip()),
        (2, "mask-plan distribution", mask_plan_distribution()),
        (3, "full-scale shapes", full_scale_shapes()),
        (4, "gradient check", gradient_check()),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (data, model, learning) = train_toy(dir.path());
    results.push((5, "learning vs unigram baseline", learning));
    results.push((6, "forced-mode preservation", forced_preservation(&data, &model)));
    results.push((7, "cross-stem harmony", cross_stem_harmony(&data, &model)));
    results.push((8, "cross-stem rhythm", cross_stem_rhythm(&data, &model)));
    results.push((9, "residual-detail editing", residual_detail(&data, &model)));
    results.push((10, "RVQ monotonicity", rvq_monotonicity()));
    results.push((11, "metric oracles", metric_oracles()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, o) in &results {
        failed += !o.pass as usize;
        println!(
            "criterion {n:>2} {:<30} {}  {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
