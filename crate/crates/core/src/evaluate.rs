//! Task-level evaluation on a symbolic dataset: text-to-music generation
//! and stem editing, scored with the objective metrics.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::edit::EditPlan;
use crate::error::{Error, Result};
use crate::layout::TokenGrid;
use crate::metrics::{
    beat_f_measure, harmonic_match, preservation_rate, random_bass_baseline, random_drum_baseline, symbolic_beats,
    symbolic_chord_track, symbolic_pitch_track, HarmonyGates, Summary, DEFAULT_BEAT_TOLERANCE_S,
};
use crate::model::{Condition, Model, ModelConfig, Scalar};
use crate::sampler::{edit, generate, DecodeParams, EditMode};
use crate::synth::{grid_bass_frames, grid_chord_frames, symbolic_detokenize, SymbolicSong, TEMPO_PERIODS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "t2m")]
    TextToMusic,
    #[serde(rename = "edit:bass")]
    EditBass,
    #[serde(rename = "edit:drums")]
    EditDrums,
    #[serde(rename = "edit:other")]
    EditOther,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::TextToMusic, Task::EditBass, Task::EditDrums, Task::EditOther];

    pub fn edited_stem(self) -> Option<&'static str> {
        match self {
            Task::TextToMusic => None,
            Task::EditBass => Some("bass"),
            Task::EditDrums => Some("drums"),
            Task::EditOther => Some("other"),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.edited_stem() {
            None => f.write_str("t2m"),
            Some(stem) => write!(f, "edit:{stem}"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.to_string() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown task `{s}` (t2m, edit:bass, edit:drums, edit:other)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    /// Songs to evaluate (the whole split when absent).
    pub n_songs: Option<usize>,
    /// Frames per example; defaults to the longest crop the model accepts.
    pub frames: Option<usize>,
    pub mode: EditMode,
    pub decode: DecodeParams,
    pub downsample_factor: usize,
    pub tolerance_s: f64,
    pub gates: HarmonyGates,
    /// Song `k` is decoded with seed `seed + k`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_songs: None,
            frames: None,
            mode: EditMode::Forced,
            decode: DecodeParams::default(),
            downsample_factor: crate::edit::DEFAULT_DOWNSAMPLE_FACTOR,
            tolerance_s: DEFAULT_BEAT_TOLERANCE_S,
            gates: HarmonyGates::default(),
            seed: 0,
        }
    }
}

/// One metric over the evaluated songs; `absent` counts songs where it was
/// undefined (e.g. every frame gated out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub summary: Option<Summary>,
    pub absent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub split: Split,
    pub n_songs: usize,
    pub frames: usize,
    pub mode: EditMode,
    pub metrics: Vec<MetricReport>,
}

impl TaskReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.metric(name)?.summary.map(|s| s.mean)
    }

    /// Fixed-width human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "task {}  split {:?}  songs {}  frames {}  mode {:?}\n{:<22} {:>8} {:>8} {:>6} {:>7}\n",
            self.task, self.split, self.n_songs, self.frames, self.mode, "metric", "mean", "stderr", "n", "absent"
        );
        for m in &self.metrics {
            match m.summary {
                Some(s) => out.push_str(&format!(
                    "{:<22} {:>8.4} {:>8.4} {:>6} {:>7}\n",
                    m.name, s.mean, s.stderr, s.n, m.absent
                )),
                None => out.push_str(&format!(
                    "{:<22} {:>8} {:>8} {:>6} {:>7}\n",
                    m.name, "-", "-", 0, m.absent
                )),
            }
        }
        out
    }
}

#[derive(Default)]
struct Collector(BTreeMap<&'static str, (Vec<f64>, usize)>);

impl Collector {
    fn push(&mut self, name: &'static str, v: Option<f64>) {
        let e = self.0.entry(name).or_default();
        match v {
            Some(x) => e.0.push(x),
            None => e.1 += 1,
        }
    }

    fn finish(self, order: &[&str]) -> Vec<MetricReport> {
        let mut map = self.0;
        order
            .iter()
            .filter_map(|name| {
                map.remove(name).map(|(xs, absent)| MetricReport {
                    name: name.to_string(),
                    summary: Summary::of(&xs),
                    absent,
                })
            })
            .collect()
    }
}

/// Longest body that fits the model next to its prefix and separator.
pub fn max_edit_frames(cfg: &ModelConfig, downsample_factor: usize) -> usize {
    let budget = cfg.max_frames.saturating_sub(cfg.layout.max_delay() + 1);
    // n + floor(n / f) <= budget
    let f = downsample_factor.max(1);
    let mut n = budget * f / (f + 1);
    while n + 1 + (n + 1) / f <= budget {
        n += 1;
    }
    n
}

/// Fraction of frames whose bass pitch class is a tone of the sounding
/// chord, with the symbolic activity gates.
pub fn grid_harmonic_match(grid: &TokenGrid, gates: HarmonyGates) -> Result<Option<f64>> {
    harmonic_match(
        &symbolic_pitch_track(&grid_bass_frames(grid)),
        &symbolic_chord_track(&grid_chord_frames(grid)),
        gates,
    )
}

/// Beat F-measure of a grid's kick/snare onsets against the song's beat
/// grid within the first `frames` frames.
pub fn grid_beat_f_measure(grid: &TokenGrid, song: &SymbolicSong, tolerance_s: f64) -> Result<f64> {
    let end = grid.n_frames() as f64 / song.frame_rate_hz;
    let reference: Vec<f64> = song.beat_times().into_iter().filter(|&t| t < end - 1e-9).collect();
    Ok(beat_f_measure(&reference, &symbolic_beats(grid)?, tolerance_s)?.f_measure)
}

/// Fraction of the source's bars (within `frames`) whose chord the edited
/// song carries at the bar's first frame.
pub fn bar_chord_agreement(source: &SymbolicSong, edited: &SymbolicSong, frames: usize) -> Option<f64> {
    let chords = edited.frame_chords();
    let bars: Vec<_> = source
        .chords
        .iter()
        .filter(|c| c.start_frame < frames.min(chords.len()))
        .collect();
    if bars.is_empty() {
        return None;
    }
    let hits = bars.iter().filter(|c| chords[c.start_frame] == Some(c.chord)).count();
    Some(hits as f64 / bars.len() as f64)
}

fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate_task<F: Scalar>(
    model: &Model<F>,
    data: &Dataset,
    task: Task,
    opts: &EvalOptions,
) -> Result<TaskReport> {
    opts.decode.validate()?;
    if !model.config.layout.same_structure(data.layout()) {
        return Err(Error::LayoutMismatch(
            "dataset layout differs from the model layout".into(),
        ));
    }
    let mut ids = data.split(opts.split);
    if let Some(n) = opts.n_songs {
        ids.truncate(n);
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!("empty {:?} split", opts.split)));
    }
    let song_frames = ids.iter().map(|&i| data.grids[i].n_frames()).min().unwrap_or(0);
    let limit = match task {
        Task::TextToMusic => model.config.max_frames.saturating_sub(model.config.layout.max_delay()),
        _ => max_edit_frames(&model.config, opts.downsample_factor),
    };
    let frames = opts.frames.unwrap_or(limit.min(song_frames));
    if frames == 0 || frames > song_frames {
        return Err(Error::InvalidArgument(format!(
            "{frames} frames requested, songs have at most {song_frames}"
        )));
    }

    let mut c = Collector::default();
    let mut baseline_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_ba5e);
    for (k, &id) in ids.iter().enumerate() {
        let seed = opts.seed.wrapping_add(k as u64);
        let cond = Condition::Id(data.condition(id));
        let song = data.song(id)?;
        let source = data.grids[id].slice_frames(0, frames)?;
        match task.edited_stem() {
            None => {
                let out = generate(model, cond, frames, &opts.decode, seed)?;
                let detok = symbolic_detokenize(&out)?;
                c.push("har", grid_harmonic_match(&out, opts.gates)?);
                c.push(
                    "tempo_match",
                    Some((detok.song.beat_period == song.beat_period) as u8 as f64),
                );
                c.push(
                    "groove_match",
                    Some((detok.song.groove() == song.groove()) as u8 as f64),
                );
                c.push("silent_drums", Some(symbolic_beats(&out)?.is_empty() as u8 as f64));
            }
            Some(stem) => {
                let plan = EditPlan::whole_stems(&[stem], opts.downsample_factor)?;
                let out = edit(model, &source, &plan, cond, opts.mode, &opts.decode, seed)?;
                c.push("har", grid_harmonic_match(&out, opts.gates)?);
                c.push("beat", Some(grid_beat_f_measure(&out, &song, opts.tolerance_s)?));
                c.push("preservation", mean_defined(&preservation_rate(&source, &out, &plan)?));
                c.push("silent_drums", Some(symbolic_beats(&out)?.is_empty() as u8 as f64));
                match task {
                    Task::EditBass => {
                        let base = random_bass_baseline(&source, &mut baseline_rng);
                        c.push("har_random_baseline", grid_harmonic_match(&base, opts.gates)?);
                    }
                    Task::EditDrums => {
                        let base = random_drum_baseline(&source, &mut baseline_rng);
                        c.push(
                            "beat_random_baseline",
                            Some(grid_beat_f_measure(&base, &song, opts.tolerance_s)?),
                        );
                    }
                    _ => {
                        let detok = symbolic_detokenize(&out)?;
                        c.push("chord_agreement", bar_chord_agreement(&song, &detok.song, frames));
                    }
                }
            }
        }
    }
    let order = [
        "har",
        "har_random_baseline",
        "beat",
        "beat_random_baseline",
        "preservation",
        "chord_agreement",
        "tempo_match",
        "groove_match",
        "silent_drums",
    ];
    Ok(TaskReport {
        task,
        split: opts.split,
        n_songs: ids.len(),
        frames,
        mode: opts.mode,
        metrics: c.finish(&order),
    })
}

/// Whether `period` is one of the corpus tempi.
pub fn is_corpus_tempo(period: usize) -> bool {
    TEMPO_PERIODS.contains(&period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize_dataset;
    use crate::synth::{symbolic_layout, StyleParams, N_CONDITIONS};
    use crate::train::TrainConfig;

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert!("edit:vocals".parse::<Task>().is_err());
    }

    #[test]
    fn max_edit_frames_fits_exactly() {
        let layout = symbolic_layout(8.0);
        let cfg = TrainConfig::toy().model_config(&layout, N_CONDITIONS);
        let n = max_edit_frames(&cfg, 5);
        assert_eq!(n, 48);
        assert!(n / 5 + 1 + n + layout.max_delay() <= cfg.max_frames);
        assert!((n + 1) / 5 + 1 + n + 1 + layout.max_delay() > cfg.max_frames);
    }

    #[test]
    fn source_songs_score_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_dataset(dir.path(), 40, &StyleParams::default(), 4).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for id in ds.split(Split::Test) {
            let song = ds.song(id).unwrap();
            let g = &ds.grids[id];
            assert_eq!(grid_harmonic_match(g, HarmonyGates::default()).unwrap(), Some(1.0));
            assert_eq!(grid_beat_f_measure(g, &song, 0.07).unwrap(), 1.0);
            let detok = symbolic_detokenize(g).unwrap();
            assert_eq!(bar_chord_agreement(&song, &detok.song, 48), Some(1.0));
            assert!(is_corpus_tempo(detok.song.beat_period));
        }
    }

    #[test]
    fn report_on_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_dataset(dir.path(), 40, &StyleParams::default(), 5).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let mut cfg = TrainConfig::toy();
        cfg.model.d_model = 16;
        cfg.model.n_layers = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::<f32>::new(cfg.model_config(ds.layout(), ds.manifest.n_conditions), &mut rng).unwrap();
        let opts = EvalOptions::default();
        let r = evaluate_task(&model, &ds, Task::EditBass, &opts).unwrap();
        assert_eq!(r.n_songs, 2);
        assert_eq!(r.frames, 48);
        assert_eq!(r.mean("preservation"), Some(1.0));
        for name in ["har", "beat", "preservation", "har_random_baseline"] {
            assert!(r.metric(name).is_some(), "{name}");
        }
        assert!(r.table().contains("har_random_baseline"));
        let again = evaluate_task(&model, &ds, Task::EditBass, &opts).unwrap();
        assert_eq!(r, again);
        let t2m = evaluate_task(&model, &ds, Task::TextToMusic, &opts).unwrap();
        assert_eq!(t2m.frames, 48);
        assert!(t2m.metric("tempo_match").is_some());
    }
}
