//! Synthetic symbolic songs with known cross-stem structure, and an exact
//! tokenizer onto the bass/drums/other layout.
//!
//! Stream codes:
//!
//! | stream  | codes                                                    |
//! |---------|----------------------------------------------------------|
//! | bass    | 0 rest, `1 + pc` note onset, `13 + pc` note sustain      |
//! | drums   | 0 rest, 1 kick, 2 snare, 3 hat                           |
//! | other 1 | chord id `root * 2 + minor` (24 triads)                  |
//! | other 2 | `inversion * 2 + onset` (onset marks each beat)          |
//! | other 3 | register (4)                                             |
//! | other 4 | velocity (4)                                             |
//!
//! Every song starts on a beat at frame 0, has one bass note (or rest), one
//! voicing and one kick or snare hit per beat, and one chord per bar.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutSpec, Token, TokenGrid};
use crate::rvq::FrameSequence;

pub const BASS_CODES: u32 = 25;
pub const DRUM_CODES: u32 = 4;
pub const CHORD_CODES: u32 = 24;
pub const N_INVERSIONS: u8 = 3;
pub const N_REGISTERS: u8 = 4;
pub const N_VELOCITIES: u8 = 4;

/// Beat periods (frames) the corpus may use; their order fixes condition ids.
pub const TEMPO_PERIODS: [usize; 3] = [4, 5, 6];
/// `TEMPO_PERIODS.len()` tempi times two grooves.
pub const N_CONDITIONS: usize = 6;
pub const TOY_FRAME_RATE_HZ: f64 = 8.0;

const BASS_SUSTAIN: u32 = 13;

/// The bass/drums/other layout used by the symbolic tokenizer.
pub fn symbolic_layout(frame_rate_hz: f64) -> LayoutSpec {
    LayoutSpec::three_stem(
        frame_rate_hz,
        [
            BASS_CODES,
            DRUM_CODES,
            CHORD_CODES,
            2 * N_INVERSIONS as u32,
            N_REGISTERS as u32,
            N_VELOCITIES as u32,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chord {
    pub root: u8,
    pub minor: bool,
}

impl Chord {
    pub fn id(self) -> u32 {
        self.root as u32 * 2 + self.minor as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        (id < CHORD_CODES).then_some(Chord {
            root: (id / 2) as u8,
            minor: id % 2 == 1,
        })
    }

    /// All 24 major and minor triads.
    pub fn all() -> Vec<Chord> {
        (0..CHORD_CODES).filter_map(Chord::from_id).collect()
    }

    pub fn pitch_classes(self) -> [u8; 3] {
        let third = if self.minor { 3 } else { 4 };
        [self.root, (self.root + third) % 12, (self.root + 7) % 12]
    }

    pub fn contains(self, pitch_class: u8) -> bool {
        self.pitch_classes().contains(&pitch_class)
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
        write!(
            f,
            "{}{}",
            NAMES[self.root as usize % 12],
            if self.minor { "m" } else { "" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrumClass {
    Kick,
    Snare,
    Hat,
}

impl DrumClass {
    pub fn code(self) -> Token {
        match self {
            DrumClass::Kick => 1,
            DrumClass::Snare => 2,
            DrumClass::Hat => 3,
        }
    }

    pub fn from_code(code: Token) -> Option<Self> {
        match code {
            1 => Some(DrumClass::Kick),
            2 => Some(DrumClass::Snare),
            3 => Some(DrumClass::Hat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Groove {
    /// Kick on beats 1 and 3, snare on 2 and 4.
    Backbeat,
    /// Kick on every beat.
    FourOnFloor,
}

impl Groove {
    fn index(self) -> usize {
        match self {
            Groove::Backbeat => 0,
            Groove::FourOnFloor => 1,
        }
    }
}

/// Condition id of a tempo (index into [`TEMPO_PERIODS`]) and groove.
pub fn condition_id(period: usize, groove: Groove) -> usize {
    let tempo = TEMPO_PERIODS
        .iter()
        .enumerate()
        .min_by_key(|(_, &p)| p.abs_diff(period))
        .map(|(i, _)| i)
        .unwrap();
    tempo * 2 + groove.index()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub frame_rate_hz: f64,
    pub n_frames: usize,
    /// Allowed beat periods in frames, a subset of [`TEMPO_PERIODS`].
    pub beat_periods: Vec<usize>,
    pub chord_vocab: Vec<Chord>,
    /// Probability a bass note is drawn from the chord's tones (otherwise
    /// uniform over all 12 pitch classes).
    pub p_ct: f64,
    /// Probability a kick/snare hit sits on its beat (otherwise half a beat
    /// late).
    pub p_ob: f64,
    /// Probability a beat has no bass note.
    pub p_rest: f64,
    /// Off-beat hats.
    pub hats: bool,
    pub beats_per_bar: usize,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            frame_rate_hz: TOY_FRAME_RATE_HZ,
            n_frames: 48,
            beat_periods: TEMPO_PERIODS.to_vec(),
            chord_vocab: Chord::all(),
            p_ct: 1.0,
            p_ob: 1.0,
            p_rest: 0.1,
            hats: false,
            beats_per_bar: 4,
        }
    }
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.chord_vocab.is_empty() {
            return bad("empty chord vocabulary");
        }
        if self.beat_periods.is_empty() || self.beat_periods.iter().any(|p| !TEMPO_PERIODS.contains(p)) {
            return bad("beat periods must be a non-empty subset of 4, 5, 6 frames");
        }
        if self.chord_vocab.iter().any(|c| c.root >= 12) {
            return bad("chord root outside 0..12");
        }
        for (name, p) in [("p_ct", self.p_ct), ("p_ob", self.p_ob), ("p_rest", self.p_rest)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.n_frames == 0 || self.beats_per_bar == 0 || !(self.frame_rate_hz > 0.0) {
            return bad("n_frames, beats_per_bar and frame_rate_hz must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarChord {
    pub start_frame: usize,
    pub chord: Chord,
}

/// A bass note (or rest, when `!active`) starting at `frame` and lasting
/// until the next bass event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BassEvent {
    pub frame: usize,
    pub pitch_class: u8,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrumEvent {
    pub frame: usize,
    pub class: DrumClass,
}

/// Voicing of the current chord held from `frame` to the next voicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Voicing {
    pub frame: usize,
    pub chord: Chord,
    pub inversion: u8,
    pub register: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicSong {
    pub frame_rate_hz: f64,
    pub n_frames: usize,
    pub bpm: f64,
    /// Beat period in frames (0 when fewer than two beats were found).
    pub beat_period: usize,
    pub beat_frames: Vec<usize>,
    pub chords: Vec<BarChord>,
    pub bass_events: Vec<BassEvent>,
    pub drum_events: Vec<DrumEvent>,
    pub other_events: Vec<Voicing>,
    pub condition_id: usize,
}

fn bpm_of(period: usize, frame_rate_hz: f64) -> f64 {
    if period == 0 {
        0.0
    } else {
        60.0 * frame_rate_hz / period as f64
    }
}

/// `[start, end)` spans of consecutive event frames, the last one running to `n`.
fn spans(starts: &[usize], n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    starts
        .iter()
        .enumerate()
        .map(move |(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(n)))
}

impl SymbolicSong {
    pub fn beat_times(&self) -> Vec<f64> {
        self.beat_frames
            .iter()
            .map(|&f| f as f64 / self.frame_rate_hz)
            .collect()
    }

    /// Chord sounding at each frame.
    pub fn frame_chords(&self) -> Vec<Option<Chord>> {
        let mut out = vec![None; self.n_frames];
        let starts: Vec<usize> = self.chords.iter().map(|c| c.start_frame).collect();
        for (c, (a, b)) in self.chords.iter().zip(spans(&starts, self.n_frames)) {
            out[a..b.min(self.n_frames)].fill(Some(c.chord));
        }
        out
    }

    /// Bass pitch class sounding at each frame.
    pub fn frame_bass(&self) -> Vec<Option<u8>> {
        let mut out = vec![None; self.n_frames];
        let starts: Vec<usize> = self.bass_events.iter().map(|e| e.frame).collect();
        for (e, (a, b)) in self.bass_events.iter().zip(spans(&starts, self.n_frames)) {
            if e.active {
                out[a..b.min(self.n_frames)].fill(Some(e.pitch_class));
            }
        }
        out
    }

    pub fn groove(&self) -> Groove {
        if self.drum_events.iter().any(|e| e.class == DrumClass::Snare) {
            Groove::Backbeat
        } else {
            Groove::FourOnFloor
        }
    }
}

pub fn generate_song<R: Rng + ?Sized>(style: &StyleParams, rng: &mut R) -> Result<SymbolicSong> {
    style.validate()?;
    let n = style.n_frames;
    let period = *style.beat_periods.choose(rng).unwrap();
    let groove = if rng.random_bool(0.5) {
        Groove::Backbeat
    } else {
        Groove::FourOnFloor
    };
    let beat_frames: Vec<usize> = (0..n).step_by(period).collect();
    let chords: Vec<BarChord> = beat_frames
        .iter()
        .step_by(style.beats_per_bar)
        .map(|&f| BarChord {
            start_frame: f,
            chord: *style.chord_vocab.choose(rng).unwrap(),
        })
        .collect();

    let mut bass_events = Vec::with_capacity(beat_frames.len());
    let mut drum_events = Vec::with_capacity(beat_frames.len() * 2);
    let mut other_events = Vec::with_capacity(beat_frames.len());
    for (i, &f) in beat_frames.iter().enumerate() {
        let chord = chords[i / style.beats_per_bar].chord;
        let rest = rng.random_bool(style.p_rest);
        let pitch_class = if rng.random_bool(style.p_ct) {
            *chord.pitch_classes().choose(rng).unwrap()
        } else {
            rng.random_range(0..12)
        };
        bass_events.push(BassEvent {
            frame: f,
            pitch_class: if rest { 0 } else { pitch_class },
            active: !rest,
        });

        let class = match groove {
            Groove::Backbeat if i % 2 == 1 => DrumClass::Snare,
            _ => DrumClass::Kick,
        };
        let late = f + period / 2;
        let frame = if rng.random_bool(style.p_ob) || late >= n {
            f
        } else {
            late
        };
        drum_events.push(DrumEvent { frame, class });

        other_events.push(Voicing {
            frame: f,
            chord,
            inversion: rng.random_range(0..N_INVERSIONS),
            register: rng.random_range(0..N_REGISTERS),
            velocity: rng.random_range(0..N_VELOCITIES),
        });
    }
    if style.hats {
        for &f in &beat_frames {
            let off = f + period / 2;
            if off < n && !drum_events.iter().any(|e| e.frame == off) {
                drum_events.push(DrumEvent {
                    frame: off,
                    class: DrumClass::Hat,
                });
            }
        }
        drum_events.sort_by_key(|e| e.frame);
    }

    Ok(SymbolicSong {
        frame_rate_hz: style.frame_rate_hz,
        n_frames: n,
        bpm: bpm_of(period, style.frame_rate_hz),
        beat_period: period,
        beat_frames,
        chords,
        bass_events,
        drum_events,
        other_events,
        condition_id: condition_id(period, groove),
    })
}

fn check_layout(layout: &LayoutSpec) -> Result<()> {
    if layout.same_structure(&symbolic_layout(layout.frame_rate_hz())) {
        Ok(())
    } else {
        Err(Error::LayoutMismatch("not the symbolic bass/drums/other layout".into()))
    }
}

pub fn symbolic_tokenize(song: &SymbolicSong, layout: &LayoutSpec) -> Result<TokenGrid> {
    check_layout(layout)?;
    let n = song.n_frames;
    let outside = |what: &str, f: usize| {
        Err(Error::InvalidArgument(format!(
            "{what} at frame {f} outside {n} frames"
        )))
    };
    if song.beat_frames.first() != Some(&0) {
        return Err(Error::InvalidArgument("song must start on a beat at frame 0".into()));
    }
    if song.bass_events.first().is_some_and(|e| e.frame != 0) || song.chords.first().is_some_and(|c| c.start_frame != 0)
    {
        return Err(Error::InvalidArgument(
            "bass and chord tracks must start at frame 0".into(),
        ));
    }
    let mut rows = vec![vec![0 as Token; n]; 6];

    let bass_starts: Vec<usize> = song.bass_events.iter().map(|e| e.frame).collect();
    for (e, (a, b)) in song.bass_events.iter().zip(spans(&bass_starts, n)) {
        if a >= n || b > n || a >= b {
            return outside("bass event", a);
        }
        if e.active {
            rows[0][a] = 1 + e.pitch_class as Token;
            rows[0][a + 1..b].fill(BASS_SUSTAIN + e.pitch_class as Token);
        }
    }
    for e in &song.drum_events {
        if e.frame >= n {
            return outside("drum event", e.frame);
        }
        rows[1][e.frame] = e.class.code();
    }
    let chord_starts: Vec<usize> = song.chords.iter().map(|c| c.start_frame).collect();
    for (c, (a, b)) in song.chords.iter().zip(spans(&chord_starts, n)) {
        if a >= n || b > n || a >= b {
            return outside("chord", a);
        }
        rows[2][a..b].fill(c.chord.id());
    }
    let voicing_starts: Vec<usize> = song.other_events.iter().map(|v| v.frame).collect();
    for (v, (a, b)) in song.other_events.iter().zip(spans(&voicing_starts, n)) {
        if a >= n || b > n || a >= b {
            return outside("voicing", a);
        }
        if v.inversion >= N_INVERSIONS || v.register >= N_REGISTERS || v.velocity >= N_VELOCITIES {
            return Err(Error::InvalidArgument(format!(
                "voicing at frame {a} has out-of-range fields"
            )));
        }
        rows[3][a..b].fill(v.inversion as Token * 2);
        rows[3][a] += 1;
        rows[4][a..b].fill(v.register as Token);
        rows[5][a..b].fill(v.velocity as Token);
    }
    TokenGrid::from_rows(layout.with_frame_rate(song.frame_rate_hz), &rows)
}

/// A decoded song and the number of implausible cells that were read as
/// rests (special ids, sustains without an onset, etc.).
#[derive(Debug, Clone, PartialEq)]
pub struct Detokenized {
    pub song: SymbolicSong,
    pub warnings: usize,
}

/// Most frequent valid value, lowest on ties.
fn majority(values: impl Iterator<Item = Token>, n_codes: u32) -> Option<Token> {
    let mut counts = vec![0usize; n_codes as usize];
    for v in values.filter(|&v| v < n_codes) {
        counts[v as usize] += 1;
    }
    let (best, &count) = counts.iter().enumerate().rev().max_by_key(|(_, &c)| c)?;
    (count > 0).then_some(best as Token)
}

pub fn symbolic_detokenize(grid: &TokenGrid) -> Result<Detokenized> {
    let layout = grid.layout();
    check_layout(layout)?;
    let n = grid.n_frames();
    let fr = layout.frame_rate_hz();
    let mut warnings = 0;
    let (bass, drums, chord_row, texture, register, velocity) = (
        grid.row(0),
        grid.row(1),
        grid.row(2),
        grid.row(3),
        grid.row(4),
        grid.row(5),
    );
    fn read(v: Token, n_codes: u32, warnings: &mut usize) -> Token {
        if v < n_codes {
            v
        } else {
            *warnings += 1;
            0
        }
    }

    let beat_frames: Vec<usize> = (0..n)
        .filter(|&t| {
            let v = read(texture[t], 2 * N_INVERSIONS as u32, &mut warnings);
            v % 2 == 1
        })
        .collect();
    let beat_period = if beat_frames.len() >= 2 {
        let mut diffs: Vec<usize> = beat_frames.windows(2).map(|w| w[1] - w[0]).collect();
        diffs.sort_unstable();
        diffs[diffs.len() / 2]
    } else {
        0
    };

    let bar_starts: Vec<usize> = beat_frames.iter().step_by(4).copied().collect();
    let mut chords = Vec::with_capacity(bar_starts.len());
    for (a, b) in spans(&bar_starts, n) {
        if let Some(id) = majority(chord_row[a..b].iter().copied(), CHORD_CODES) {
            chords.push(BarChord {
                start_frame: a,
                chord: Chord::from_id(id).unwrap(),
            });
        }
    }
    let chord_at = |t: usize| chords.iter().rev().find(|c| c.start_frame <= t).map(|c| c.chord);

    let mut bass_events = Vec::with_capacity(beat_frames.len());
    let mut other_events = Vec::with_capacity(beat_frames.len());
    for (a, b) in spans(&beat_frames, n) {
        let onset = bass[a];
        let event = if (1..BASS_SUSTAIN).contains(&onset) {
            let pc = (onset - 1) as u8;
            warnings += bass[a + 1..b]
                .iter()
                .filter(|&&v| v != BASS_SUSTAIN + pc as Token)
                .count();
            BassEvent {
                frame: a,
                pitch_class: pc,
                active: true,
            }
        } else {
            warnings += (onset != 0) as usize + bass[a + 1..b].iter().filter(|&&v| v != 0).count();
            BassEvent {
                frame: a,
                pitch_class: 0,
                active: false,
            }
        };
        bass_events.push(event);
        if let Some(chord) = chord_at(a) {
            other_events.push(Voicing {
                frame: a,
                chord,
                inversion: (texture[a].min(2 * N_INVERSIONS as u32 - 1) / 2) as u8,
                register: read(register[a], N_REGISTERS as u32, &mut warnings) as u8,
                velocity: read(velocity[a], N_VELOCITIES as u32, &mut warnings) as u8,
            });
        }
    }
    // Bass before the first beat has no event to belong to.
    let head = beat_frames.first().copied().unwrap_or(n);
    warnings += bass[..head].iter().filter(|&&v| v != 0).count();

    let mut drum_events = Vec::new();
    for (t, &v) in drums.iter().enumerate() {
        match DrumClass::from_code(v) {
            Some(class) => drum_events.push(DrumEvent { frame: t, class }),
            None if v == 0 => {}
            None => warnings += 1,
        }
    }

    let mut song = SymbolicSong {
        frame_rate_hz: fr,
        n_frames: n,
        bpm: bpm_of(beat_period, fr),
        beat_period,
        beat_frames,
        chords,
        bass_events,
        drum_events,
        other_events,
        condition_id: 0,
    };
    song.condition_id = condition_id(beat_period, song.groove());
    Ok(Detokenized { song, warnings })
}

/// Per-frame bass pitch class read straight from a token grid (onset or
/// sustain codes).
pub fn grid_bass_frames(grid: &TokenGrid) -> Vec<Option<u8>> {
    grid.row(0)
        .iter()
        .map(|&v| match v {
            1..=12 => Some((v - 1) as u8),
            13..=24 => Some((v - BASS_SUSTAIN) as u8),
            _ => None,
        })
        .collect()
}

/// Per-frame chord read from the first `other` stream.
pub fn grid_chord_frames(grid: &TokenGrid) -> Vec<Option<Chord>> {
    grid.row(2).iter().map(|&v| Chord::from_id(v)).collect()
}

/// Continuous per-stem feature frames of a song, for the RVQ tokenizer
/// path: bass 13-d (chroma + onset), drums 3-d (kick, snare, hat), other
/// 16-d (chord chroma scaled by velocity + onset, inversion, register,
/// velocity).
pub fn render_frames(song: &SymbolicSong) -> Vec<(String, FrameSequence)> {
    let n = song.n_frames;
    let fr = song.frame_rate_hz;
    let mut bass = vec![0.0; n * 13];
    let bass_frames = song.frame_bass();
    let onsets: Vec<usize> = song.bass_events.iter().filter(|e| e.active).map(|e| e.frame).collect();
    for (t, pc) in bass_frames.iter().enumerate() {
        if let Some(pc) = pc {
            bass[t * 13 + *pc as usize] = 1.0;
        }
        if onsets.contains(&t) {
            bass[t * 13 + 12] = 1.0;
        }
    }
    let mut drums = vec![0.0; n * 3];
    for e in &song.drum_events {
        drums[e.frame * 3 + e.class.code() as usize - 1] = 1.0;
    }
    let mut other = vec![0.0; n * 16];
    let starts: Vec<usize> = song.other_events.iter().map(|v| v.frame).collect();
    for (v, (a, b)) in song.other_events.iter().zip(spans(&starts, n)) {
        let level = 0.5 + v.velocity as f64 / 6.0;
        for t in a..b.min(n) {
            let row = &mut other[t * 16..(t + 1) * 16];
            for pc in v.chord.pitch_classes() {
                row[pc as usize] = level;
            }
            row[12] = (t == a) as u8 as f64;
            row[13] = v.inversion as f64 / 2.0;
            row[14] = v.register as f64 / 3.0;
            row[15] = v.velocity as f64 / 3.0;
        }
    }
    let seq = |dim, data| {
        FrameSequence::new(dim, data)
            .expect("consistent frame data")
            .with_frame_rate(fr)
    };
    vec![
        ("bass".to_string(), seq(13, bass)),
        ("drums".to_string(), seq(3, drums)),
        ("other".to_string(), seq(16, other)),
    ]
}

/// Fraction of active bass notes that are tones of their bar's chord.
pub fn chord_tone_rate(songs: &[SymbolicSong]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for song in songs {
        let chords = song.frame_chords();
        for e in song.bass_events.iter().filter(|e| e.active) {
            if let Some(c) = chords[e.frame] {
                total += 1;
                hits += c.contains(e.pitch_class) as usize;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Fraction of kick/snare hits that sit exactly on a beat.
pub fn on_beat_rate(songs: &[SymbolicSong]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for song in songs {
        for e in song.drum_events.iter().filter(|e| e.class != DrumClass::Hat) {
            total += 1;
            hits += song.beat_frames.binary_search(&e.frame).is_ok() as usize;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
