//! Multi-stem, multi-stream token layouts and the frame-synchronous token grid.
//!
//! A layout is an ordered list of stems, each owning one or more RVQ streams.
//! Streams are flattened in stem order and then stage order, so the default
//! bass/drums/other layout maps to streams `[bass, drums, other1..other4]`.
//! Every stream reserves [`N_SPECIALS`] ids directly above its codebook.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Number of reserved ids per stream, placed at `codebook_size..codebook_size + N_SPECIALS`.
pub const N_SPECIALS: u32 = 4;

pub const AUDIO_FRAME_RATE_HZ: f64 = 50.0;
pub const DEFAULT_CODEBOOK_SIZE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    PadDelay,
    Mask,
    Sep,
    Bos,
}

impl Special {
    pub const ALL: [Special; 4] = [Special::PadDelay, Special::Mask, Special::Sep, Special::Bos];

    fn offset(self) -> u32 {
        match self {
            Special::PadDelay => 0,
            Special::Mask => 1,
            Special::Sep => 2,
            Special::Bos => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub name: String,
    /// One codebook size per RVQ stage; the length is the stem's stream count.
    pub codebook_sizes: Vec<u32>,
}

impl StemSpec {
    pub fn new(name: impl Into<String>, codebook_sizes: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            codebook_sizes,
        }
    }

    /// A stem whose `n_streams` stages share one codebook size.
    pub fn uniform(name: impl Into<String>, n_streams: usize, codebook_size: u32) -> Self {
        Self::new(name, vec![codebook_size; n_streams])
    }

    pub fn n_streams(&self) -> usize {
        self.codebook_sizes.len()
    }
}

/// How per-stream delays are derived when building a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DelayRule {
    /// First stage of every stem at 0, residual stages at 1, 2, ... frames.
    ResidualStages,
    /// No delays at all.
    None,
    /// One delay per flattened stream.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamInfo {
    pub stem: usize,
    /// 1-based RVQ stage within the stem.
    pub stage: usize,
    pub codebook_size: u32,
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutDesc", into = "LayoutDesc")]
pub struct LayoutSpec {
    stems: Vec<StemSpec>,
    frame_rate_hz: f64,
    delays: Vec<usize>,
    streams: Vec<StreamInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutDesc {
    stems: Vec<StemSpec>,
    frame_rate_hz: f64,
    delays: Vec<usize>,
}

impl TryFrom<LayoutDesc> for LayoutSpec {
    type Error = Error;

    fn try_from(desc: LayoutDesc) -> Result<Self> {
        make_layout(desc.stems, desc.frame_rate_hz, DelayRule::Explicit(desc.delays))
    }
}

impl From<LayoutSpec> for LayoutDesc {
    fn from(layout: LayoutSpec) -> Self {
        LayoutDesc {
            stems: layout.stems,
            frame_rate_hz: layout.frame_rate_hz,
            delays: layout.delays,
        }
    }
}

/// Builds and validates a layout.
pub fn make_layout(stems: Vec<StemSpec>, frame_rate_hz: f64, rule: DelayRule) -> Result<LayoutSpec> {
    if stems.is_empty() {
        return Err(Error::Layout("no stems".into()));
    }
    if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
        return Err(Error::Layout(format!(
            "frame rate must be positive, got {frame_rate_hz}"
        )));
    }
    let mut seen = HashSet::new();
    for stem in &stems {
        if stem.name.is_empty() {
            return Err(Error::Layout("empty stem name".into()));
        }
        if !seen.insert(stem.name.as_str()) {
            return Err(Error::Layout(format!("duplicate stem name `{}`", stem.name)));
        }
        if stem.n_streams() == 0 {
            return Err(Error::Layout(format!("stem `{}` has zero streams", stem.name)));
        }
        if let Some(&cb) = stem.codebook_sizes.iter().find(|&&cb| cb < 2) {
            return Err(Error::Layout(format!(
                "stem `{}` has codebook size {cb} (< 2)",
                stem.name
            )));
        }
        if stem
            .codebook_sizes
            .iter()
            .any(|&cb| cb.checked_add(N_SPECIALS).is_none())
        {
            return Err(Error::Layout(format!("stem `{}` codebook too large", stem.name)));
        }
    }

    let n_total: usize = stems.iter().map(StemSpec::n_streams).sum();
    let delays = match rule {
        DelayRule::ResidualStages => stems.iter().flat_map(|s| 0..s.n_streams()).collect::<Vec<_>>(),
        DelayRule::None => vec![0; n_total],
        DelayRule::Explicit(d) => {
            if d.len() != n_total {
                return Err(Error::Layout(format!("{} delays given for {n_total} streams", d.len())));
            }
            d
        }
    };

    let mut streams = Vec::with_capacity(n_total);
    for (stem_idx, stem) in stems.iter().enumerate() {
        for (k, &cb) in stem.codebook_sizes.iter().enumerate() {
            streams.push(StreamInfo {
                stem: stem_idx,
                stage: k + 1,
                codebook_size: cb,
                delay: delays[streams.len()],
            });
        }
    }

    Ok(LayoutSpec {
        stems,
        frame_rate_hz,
        delays,
        streams,
    })
}

impl LayoutSpec {
    /// bass:1, drums:1, other:4 streams at 50 Hz with codebooks of 64 and
    /// delays `[0, 0, 0, 1, 2, 3]`.
    pub fn audio_default() -> Self {
        Self::three_stem(AUDIO_FRAME_RATE_HZ, [DEFAULT_CODEBOOK_SIZE; 6])
    }

    /// The bass/drums/other layout with explicit per-stream codebook sizes.
    pub fn three_stem(frame_rate_hz: f64, codebooks: [u32; 6]) -> Self {
        make_layout(
            vec![
                StemSpec::new("bass", vec![codebooks[0]]),
                StemSpec::new("drums", vec![codebooks[1]]),
                StemSpec::new("other", codebooks[2..].to_vec()),
            ],
            frame_rate_hz,
            DelayRule::ResidualStages,
        )
        .expect("static layout is valid")
    }

    pub fn stems(&self) -> &[StemSpec] {
        &self.stems
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }

    pub fn n_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn streams(&self) -> &[StreamInfo] {
        &self.streams
    }

    pub fn stream(&self, index: usize) -> &StreamInfo {
        &self.streams[index]
    }

    pub fn codebook_size(&self, stream: usize) -> u32 {
        self.streams[stream].codebook_size
    }

    /// Codebook plus reserved ids.
    pub fn vocab_size(&self, stream: usize) -> usize {
        (self.codebook_size(stream) + N_SPECIALS) as usize
    }

    pub fn special(&self, stream: usize, special: Special) -> Token {
        self.codebook_size(stream) + special.offset()
    }

    pub fn special_kind(&self, stream: usize, token: Token) -> Option<Special> {
        let cb = self.codebook_size(stream);
        if token < cb {
            return None;
        }
        Special::ALL.into_iter().find(|s| cb + s.offset() == token)
    }

    pub fn is_codebook_token(&self, stream: usize, token: Token) -> bool {
        token < self.codebook_size(stream)
    }

    pub fn stem_index(&self, name: &str) -> Result<usize> {
        self.stems
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownStem(name.to_string()))
    }

    /// Flattened streams owned by a stem, in stage order.
    pub fn stem_streams(&self, stem: usize) -> std::ops::Range<usize> {
        let start: usize = self.stems[..stem].iter().map(StemSpec::n_streams).sum();
        start..start + self.stems[stem].n_streams()
    }

    /// A copy of this layout carrying a different (effective) frame rate.
    pub fn with_frame_rate(&self, frame_rate_hz: f64) -> Self {
        let mut out = self.clone();
        out.frame_rate_hz = frame_rate_hz;
        out
    }

    /// Layout equality ignoring frame rate annotations.
    pub fn same_structure(&self, other: &LayoutSpec) -> bool {
        self.stems == other.stems && self.delays == other.delays
    }
}

/// Flattened stream index of `(stem_name, stage)`, with 1-based `stage`.
pub fn stream_index(layout: &LayoutSpec, stem_name: &str, stage: usize) -> Result<usize> {
    let stem = layout.stem_index(stem_name)?;
    let n_streams = layout.stems[stem].n_streams();
    if stage == 0 || stage > n_streams {
        return Err(Error::StageOutOfRange {
            stem: stem_name.to_string(),
            stage,
            n_streams,
        });
    }
    Ok(layout.stem_streams(stem).start + stage - 1)
}

/// Inverse of [`stream_index`].
pub fn stream_location(layout: &LayoutSpec, index: usize) -> Result<(&str, usize)> {
    let info = layout
        .streams
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("stream {index} out of range")))?;
    Ok((layout.stems[info.stem].name.as_str(), info.stage))
}

/// `S` parallel token streams over `T` frames, stored row-major (stream-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    layout: LayoutSpec,
    n_frames: usize,
    tokens: Vec<Token>,
}

impl TokenGrid {
    pub fn new(layout: LayoutSpec, n_frames: usize, tokens: Vec<Token>) -> Result<Self> {
        let expected = layout.n_streams() * n_frames;
        if tokens.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: tokens.len(),
            });
        }
        Ok(Self {
            layout,
            n_frames,
            tokens,
        })
    }

    pub fn filled(layout: LayoutSpec, n_frames: usize, token: Token) -> Self {
        let n = layout.n_streams() * n_frames;
        Self {
            layout,
            n_frames,
            tokens: vec![token; n],
        }
    }

    /// Builds a grid from per-stream rows of equal length.
    pub fn from_rows(layout: LayoutSpec, rows: &[Vec<Token>]) -> Result<Self> {
        if rows.len() != layout.n_streams() {
            return Err(Error::DimensionMismatch {
                expected: layout.n_streams(),
                got: rows.len(),
            });
        }
        let n_frames = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_frames) {
            return Err(Error::DimensionMismatch {
                expected: n_frames,
                got: bad.len(),
            });
        }
        Self::new(layout, n_frames, rows.concat())
    }

    pub fn layout(&self) -> &LayoutSpec {
        &self.layout
    }

    pub fn n_streams(&self) -> usize {
        self.layout.n_streams()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, stream: usize, frame: usize) -> Token {
        self.tokens[stream * self.n_frames + frame]
    }

    pub fn set(&mut self, stream: usize, frame: usize, token: Token) {
        self.tokens[stream * self.n_frames + frame] = token;
    }

    pub fn row(&self, stream: usize) -> &[Token] {
        &self.tokens[stream * self.n_frames..(stream + 1) * self.n_frames]
    }

    pub fn row_mut(&mut self, stream: usize) -> &mut [Token] {
        let t = self.n_frames;
        &mut self.tokens[stream * t..(stream + 1) * t]
    }

    /// Frames `[start, end)` of every stream.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<TokenGrid> {
        if start > end || end > self.n_frames {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{end} outside 0..{}",
                self.n_frames
            )));
        }
        let rows: Vec<Vec<Token>> = (0..self.n_streams())
            .map(|s| self.row(s)[start..end].to_vec())
            .collect();
        TokenGrid::from_rows(self.layout.clone(), &rows)
    }

    pub fn with_layout(mut self, layout: LayoutSpec) -> Result<Self> {
        if layout.n_streams() != self.layout.n_streams() {
            return Err(Error::LayoutMismatch("stream count differs".into()));
        }
        self.layout = layout;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GridReport> {
        validate_grid(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridViolation {
    pub stream: usize,
    pub frame: usize,
    pub token: Token,
}

/// Violations found by [`validate_grid`]: the first one in stream-major
/// order plus a total count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridReport {
    pub first: GridViolation,
    pub count: usize,
}

impl fmt::Display for GridReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} invalid token(s); first at (stream {}, frame {}) = {}",
            self.count, self.first.stream, self.first.frame, self.first.token
        )
    }
}

impl std::error::Error for GridReport {}

impl From<GridReport> for Error {
    fn from(r: GridReport) -> Self {
        Error::InvalidGrid(r.to_string())
    }
}

pub fn validate_grid(grid: &TokenGrid) -> Result<(), GridReport> {
    let layout = grid.layout();
    let mut first = None;
    let mut count = 0;
    for s in 0..grid.n_streams() {
        let max = layout.codebook_size(s) + N_SPECIALS;
        for (t, &tok) in grid.row(s).iter().enumerate() {
            if tok >= max {
                count += 1;
                first.get_or_insert(GridViolation {
                    stream: s,
                    frame: t,
                    token: tok,
                });
            }
        }
    }
    match first {
        None => Ok(()),
        Some(first) => Err(GridReport { first, count }),
    }
}
