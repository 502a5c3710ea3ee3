//! Objective editing metrics: beat F-measure, harmonic match, stream
//! preservation, plus symbolic extractors and random baselines.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edit::EditPlan;
use crate::error::{Error, Result};
use crate::layout::{Token, TokenGrid};
use crate::synth::{symbolic_layout, Chord, DrumClass, SymbolicSong};

pub const DEFAULT_BEAT_TOLERANCE_S: f64 = 0.07;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.75;
pub const DEFAULT_LOUDNESS_GATE_DB: f64 = -35.0;
/// Loudness assigned to silent frames in the symbolic pipeline.
pub const SILENT_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatScore {
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    /// No estimated beats while the reference has some.
    pub silent: bool,
}

fn check_sorted(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} beats contain a non-finite time"
        )));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(format!("{name} beats are not sorted")));
    }
    Ok(())
}

/// Beat F-measure with one-to-one matching: candidate pairs within
/// `tolerance_s` are taken greedily in order of increasing distance.
pub fn beat_f_measure(reference: &[f64], estimated: &[f64], tolerance_s: f64) -> Result<BeatScore> {
    check_sorted("reference", reference)?;
    check_sorted("estimated", estimated)?;
    if !(tolerance_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be > 0, got {tolerance_s}"
        )));
    }
    match (reference.is_empty(), estimated.is_empty()) {
        (true, true) => {
            return Ok(BeatScore {
                f_measure: 1.0,
                precision: 1.0,
                recall: 1.0,
                matched: 0,
                silent: false,
            })
        }
        (true, false) | (false, true) => {
            return Ok(BeatScore {
                f_measure: 0.0,
                precision: 0.0,
                recall: 0.0,
                matched: 0,
                silent: estimated.is_empty(),
            })
        }
        _ => {}
    }
    let mut pairs = Vec::new();
    for (i, &r) in reference.iter().enumerate() {
        // Both lists are sorted, so only a window of estimates can match.
        let lo = estimated.partition_point(|&e| e < r - tolerance_s);
        for (j, &e) in estimated.iter().enumerate().skip(lo) {
            if e > r + tolerance_s {
                break;
            }
            pairs.push(((e - r).abs(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ref_used = vec![false; reference.len()];
    let mut est_used = vec![false; estimated.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !ref_used[i] && !est_used[j] {
            ref_used[i] = true;
            est_used[j] = true;
            matched += 1;
        }
    }
    let precision = matched as f64 / estimated.len() as f64;
    let recall = matched as f64 / reference.len() as f64;
    let f_measure = if matched == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BeatScore {
        f_measure,
        precision,
        recall,
        matched,
        silent: false,
    })
}

/// One frame of an estimated bass pitch track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchFrame {
    pub pitch_class: Option<u8>,
    pub confidence: f64,
    pub loudness_db: f64,
}

/// One frame of a chord track: the chord's pitch classes as a 12-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordFrame {
    pub tones: u16,
    pub loudness_db: f64,
}

impl ChordFrame {
    pub fn new(pitch_classes: &[u8], loudness_db: f64) -> Self {
        let tones = pitch_classes.iter().fold(0u16, |m, &pc| m | 1 << (pc % 12));
        Self { tones, loudness_db }
    }

    pub fn contains(&self, pitch_class: u8) -> bool {
        self.tones >> (pitch_class % 12) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonyGates {
    /// Frames need confidence strictly above this.
    pub confidence_threshold: f64,
    /// Frames quieter than this (on either stem) are excluded.
    pub loudness_gate_db: f64,
}

impl Default for HarmonyGates {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            loudness_gate_db: DEFAULT_LOUDNESS_GATE_DB,
        }
    }
}

/// Fraction of gated frames where the bass plays a tone of the chord;
/// `None` when no frame survives the gates.
pub fn harmonic_match(bass: &[PitchFrame], chords: &[ChordFrame], gates: HarmonyGates) -> Result<Option<f64>> {
    if bass.len() != chords.len() {
        return Err(Error::DimensionMismatch {
            expected: bass.len(),
            got: chords.len(),
        });
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (b, c) in bass.iter().zip(chords) {
        let Some(pc) = b.pitch_class else { continue };
        if b.confidence > gates.confidence_threshold
            && b.loudness_db >= gates.loudness_gate_db
            && c.loudness_db >= gates.loudness_gate_db
            && c.tones != 0
        {
            total += 1;
            hits += c.contains(pc) as usize;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Symbolic pitch track: sounding frames get confidence 1 at 0 dB.
pub fn symbolic_pitch_track(bass: &[Option<u8>]) -> Vec<PitchFrame> {
    bass.iter()
        .map(|&pc| PitchFrame {
            pitch_class: pc,
            confidence: if pc.is_some() { 1.0 } else { 0.0 },
            loudness_db: if pc.is_some() { 0.0 } else { SILENT_DB },
        })
        .collect()
}

pub fn symbolic_chord_track(chords: &[Option<Chord>]) -> Vec<ChordFrame> {
    chords
        .iter()
        .map(|c| match c {
            Some(c) => ChordFrame::new(&c.pitch_classes(), 0.0),
            None => ChordFrame {
                tones: 0,
                loudness_db: SILENT_DB,
            },
        })
        .collect()
}

/// Token match fraction per stream; `None` for masked streams.
pub fn preservation_rate(source: &TokenGrid, edited: &TokenGrid, plan: &EditPlan) -> Result<Vec<Option<f64>>> {
    if !source.layout().same_structure(edited.layout()) {
        return Err(Error::LayoutMismatch("source and edited grids differ in layout".into()));
    }
    if source.n_frames() != edited.n_frames() {
        return Err(Error::DimensionMismatch {
            expected: source.n_frames(),
            got: edited.n_frames(),
        });
    }
    let masked = plan.masked_streams(source.layout())?;
    let n = source.n_frames().max(1) as f64;
    Ok((0..source.n_streams())
        .map(|s| {
            (!masked[s]).then(|| source.row(s).iter().zip(edited.row(s)).filter(|(a, b)| a == b).count() as f64 / n)
        })
        .collect())
}

fn onset_times(frames: impl Iterator<Item = usize>, frame_rate_hz: f64) -> Vec<f64> {
    let mut out: Vec<usize> = Vec::new();
    for f in frames {
        // Hits in adjacent frames are one onset.
        if out.last().is_none_or(|&last| f > last + 1) {
            out.push(f);
        }
    }
    out.into_iter().map(|f| f as f64 / frame_rate_hz).collect()
}

fn is_beat_class(code: Token) -> bool {
    matches!(DrumClass::from_code(code), Some(DrumClass::Kick | DrumClass::Snare))
}

/// Kick/snare onset times of a symbolic drum stream.
pub fn symbolic_beats(grid: &TokenGrid) -> Result<Vec<f64>> {
    let layout = grid.layout();
    if !layout.same_structure(&symbolic_layout(layout.frame_rate_hz())) {
        return Err(Error::LayoutMismatch("beat extraction needs a symbolic grid".into()));
    }
    let drums = grid.row(1);
    Ok(onset_times(
        (0..drums.len()).filter(|&t| is_beat_class(drums[t])),
        layout.frame_rate_hz(),
    ))
}

/// Kick/snare onset times of a song's drum events.
pub fn song_beats(song: &SymbolicSong) -> Vec<f64> {
    let mut frames: Vec<usize> = song
        .drum_events
        .iter()
        .filter(|e| e.class != DrumClass::Hat)
        .map(|e| e.frame)
        .collect();
    frames.sort_unstable();
    onset_times(frames.into_iter(), song.frame_rate_hz)
}

/// Replaces the bass stream with uniformly random codebook tokens.
pub fn random_bass_baseline<R: Rng + ?Sized>(grid: &TokenGrid, rng: &mut R) -> TokenGrid {
    let mut out = grid.clone();
    let cb = grid.layout().codebook_size(0);
    for v in out.row_mut(0) {
        *v = rng.random_range(0..cb);
    }
    out
}

/// Replaces the drum stream with as many kick onsets as the source has
/// kick/snare hits, at uniformly random distinct frames.
pub fn random_drum_baseline<R: Rng + ?Sized>(grid: &TokenGrid, rng: &mut R) -> TokenGrid {
    let mut out = grid.clone();
    let n = grid.n_frames();
    let count = grid.row(1).iter().filter(|&&v| is_beat_class(v)).count().min(n);
    let row = out.row_mut(1);
    row.fill(0);
    for f in index::sample(rng, n, count) {
        row[f] = DrumClass::Kick.code();
    }
    out
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stderr, n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutSpec;
    use crate::synth::{generate_song, symbolic_tokenize, StyleParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beat_worked_examples() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(beat_f_measure(&r, &r, 0.07).unwrap().f_measure, 1.0);
        let s = beat_f_measure(&r, &[], 0.07).unwrap();
        assert_eq!(s.f_measure, 0.0);
        assert!(s.silent);
        let s = beat_f_measure(&r, &[1.05, 2.2, 3.0], 0.07).unwrap();
        assert_eq!(s.matched, 2);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert_eq!(s.f_measure, 2.0 / 3.0);
        assert_eq!(beat_f_measure(&[], &[], 0.07).unwrap().f_measure, 1.0);
        assert_eq!(beat_f_measure(&[], &[1.0], 0.07).unwrap().f_measure, 0.0);
    }

    #[test]
    fn beat_errors() {
        assert!(beat_f_measure(&[2.0, 1.0], &[1.0], 0.07).is_err());
        assert!(beat_f_measure(&[1.0], &[1.0], 0.0).is_err());
        assert!(beat_f_measure(&[f64::NAN], &[1.0], 0.07).is_err());
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        // Two estimates near one reference: only one may match.
        let s = beat_f_measure(&[1.0], &[0.98, 1.01], 0.07).unwrap();
        assert_eq!(s.matched, 1);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 1.0);
    }

    fn root_track(n: usize, rng: &mut ChaCha8Rng) -> (Vec<PitchFrame>, Vec<ChordFrame>, Vec<Chord>) {
        let chords: Vec<Chord> = (0..n)
            .map(|_| Chord::from_id(rng.random_range(0..24)).unwrap())
            .collect();
        let bass = chords.iter().map(|c| Some(c.root)).collect::<Vec<_>>();
        let ch = chords.iter().map(|&c| Some(c)).collect::<Vec<_>>();
        (symbolic_pitch_track(&bass), symbolic_chord_track(&ch), chords)
    }

    #[test]
    fn harmony_worked_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bass, chords, chord_list) = root_track(500, &mut rng);
        assert_eq!(
            harmonic_match(&bass, &chords, HarmonyGates::default()).unwrap(),
            Some(1.0)
        );

        // Uniform pitch classes against triads: 3 of 12 classes match.
        let n = 200_000;
        let random: Vec<Option<u8>> = (0..n).map(|_| Some(rng.random_range(0..12))).collect();
        let ch: Vec<Option<Chord>> = (0..n).map(|i| Some(chord_list[i % chord_list.len()])).collect();
        let r = harmonic_match(
            &symbolic_pitch_track(&random),
            &symbolic_chord_track(&ch),
            HarmonyGates::default(),
        )
        .unwrap()
        .unwrap();
        assert!((r - 0.25).abs() < 0.005, "{r}");

        let quiet: Vec<PitchFrame> = bass
            .iter()
            .map(|b| PitchFrame {
                loudness_db: -40.0,
                ..*b
            })
            .collect();
        assert_eq!(harmonic_match(&quiet, &chords, HarmonyGates::default()).unwrap(), None);
    }

    #[test]
    fn harmony_gates() {
        let frame = |pc, conf, db| PitchFrame {
            pitch_class: Some(pc),
            confidence: conf,
            loudness_db: db,
        };
        let c = ChordFrame::new(&[0, 4, 7], 0.0);
        let bass = [
            frame(0, 0.9, 0.0),
            frame(1, 0.75, 0.0),
            frame(2, 0.9, -35.0),
            frame(3, 0.9, -35.1),
        ];
        // Frame 1 fails confidence (strict), frame 3 fails loudness.
        let r = harmonic_match(&bass, &[c; 4], HarmonyGates::default()).unwrap();
        assert_eq!(r, Some(0.5));
        assert!(harmonic_match(&bass, &[c; 3], HarmonyGates::default()).is_err());
    }

    proptest! {
        #[test]
        fn f_measure_symmetric(mut a in prop::collection::vec(0.0f64..10.0, 0..20),
                               mut b in prop::collection::vec(0.0f64..10.0, 0..20)) {
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let x = beat_f_measure(&a, &b, 0.07).unwrap();
            let y = beat_f_measure(&b, &a, 0.07).unwrap();
            prop_assert_eq!(x.f_measure, y.f_measure);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert!((0.0..=1.0).contains(&x.f_measure));
        }

        #[test]
        fn gated_frames_do_not_change_harmony(seed in any::<u64>(), extra in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let bass: Vec<Option<u8>> = (0..n).map(|_| Some(rng.random_range(0..12))).collect();
            let ch: Vec<Option<Chord>> = (0..n).map(|_| Chord::from_id(rng.random_range(0..24))).collect();
            let mut b = symbolic_pitch_track(&bass);
            let mut c = symbolic_chord_track(&ch);
            let before = harmonic_match(&b, &c, HarmonyGates::default()).unwrap();
            for i in 0..extra {
                let pos = rng.random_range(0..=b.len());
                let gated = PitchFrame {
                    pitch_class: Some((i % 12) as u8),
                    confidence: if i % 2 == 0 { 0.5 } else { 1.0 },
                    loudness_db: if i % 2 == 0 { 0.0 } else { -50.0 },
                };
                b.insert(pos, gated);
                c.insert(pos, ChordFrame::new(&[0, 4, 7], 0.0));
            }
            prop_assert_eq!(before, harmonic_match(&b, &c, HarmonyGates::default()).unwrap());
        }
    }

    #[test]
    fn preservation() {
        let layout = crate::synth::symbolic_layout(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let song = generate_song(&StyleParams::default(), &mut rng).unwrap();
        let g = symbolic_tokenize(&song, &layout).unwrap();
        let plan = EditPlan::parse(&["drums"], &layout, 5).unwrap();
        let same = preservation_rate(&g, &g, &plan).unwrap();
        assert_eq!(same[1], None);
        assert!(same.iter().flatten().all(|&r| r == 1.0));

        // A fully random stream matches at chance.
        let wide = LayoutSpec::three_stem(8.0, [16; 6]);
        let n = 20_000;
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<Token>> {
            (0..6)
                .map(|_| (0..n).map(|_| rng.random_range(0..16)).collect())
                .collect()
        };
        let a = TokenGrid::from_rows(wide.clone(), &rows(&mut rng)).unwrap();
        let b = TokenGrid::from_rows(wide.clone(), &rows(&mut rng)).unwrap();
        let none = EditPlan::unmasked(5).unwrap();
        for r in preservation_rate(&a, &b, &none).unwrap() {
            assert!((r.unwrap() - 1.0 / 16.0).abs() < 0.01);
        }
        let short = a.slice_frames(0, 10).unwrap();
        assert!(preservation_rate(&a, &short, &none).is_err());
    }

    #[test]
    fn symbolic_beat_extraction() {
        let layout = crate::synth::symbolic_layout(8.0);
        let style = StyleParams {
            beat_periods: vec![4],
            ..Default::default()
        };
        let song = generate_song(&style, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = symbolic_tokenize(&song, &layout).unwrap();
        let beats = symbolic_beats(&g).unwrap();
        assert_eq!(beats, song.beat_times());
        assert!(beats.windows(2).all(|w| w[1] - w[0] == 0.5));
        assert_eq!(song_beats(&song), beats);

        let mut silent = g.clone();
        silent.row_mut(1).fill(0);
        assert!(symbolic_beats(&silent).unwrap().is_empty());

        // Jitter each hit by up to one frame (keeping hits apart).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut jittered = g.clone();
        jittered.row_mut(1).fill(0);
        for &f in &song.beat_frames {
            let j = (f as i64 + rng.random_range(-1..=1)).clamp(0, 47) as usize;
            jittered.set(1, j, 1);
        }
        let est = symbolic_beats(&jittered).unwrap();
        assert_eq!(est.len(), song.beat_frames.len());
        for (e, r) in est.iter().zip(song.beat_times()) {
            assert!((e - r).abs() <= 1.0 / 8.0 + 1e-12);
        }
        assert!(symbolic_beats(&TokenGrid::filled(LayoutSpec::audio_default(), 4, 0)).is_err());
    }

    #[test]
    fn baselines() {
        let layout = crate::synth::symbolic_layout(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let song = generate_song(&StyleParams::default(), &mut rng).unwrap();
        let g = symbolic_tokenize(&song, &layout).unwrap();
        let d = random_drum_baseline(&g, &mut rng);
        let count = |x: &TokenGrid| x.row(1).iter().filter(|&&v| v == 1 || v == 2).count();
        assert_eq!(count(&d), count(&g));
        let b = random_bass_baseline(&g, &mut rng);
        assert_eq!(b.row(2), g.row(2));
        assert!(b.row(0).iter().all(|&v| v < 25));
    }

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }
}
