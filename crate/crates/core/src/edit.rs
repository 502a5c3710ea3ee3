//! Masked-prefix conditioning for stem editing.
//!
//! An editing sequence is `prefix ++ SEP ++ body`: the prefix is the body
//! stride-downsampled by `downsample_factor`, with every masked stream
//! replaced by `MASK`. Loss is only taken on body cells. The delay pattern
//! is applied to the concatenated sequence as a whole.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::delay::{apply_delay, delay_cells, DelayedGrid};
use crate::error::{Error, Result};
use crate::layout::{LayoutSpec, Special, Token, TokenGrid};

pub const DEFAULT_DOWNSAMPLE_FACTOR: usize = 5;

/// Masks stages `first_stage..=n_streams` of one stem (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemMask {
    pub stem: String,
    pub first_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    masks: Vec<StemMask>,
    downsample_factor: usize,
}

impl EditPlan {
    pub fn new(masks: Vec<StemMask>, downsample_factor: usize) -> Result<Self> {
        if downsample_factor == 0 {
            return Err(Error::InvalidPlan("downsample factor must be >= 1".into()));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.first_stage == 0 {
                return Err(Error::InvalidPlan(format!("stem `{}`: stages are 1-based", m.stem)));
            }
            if masks[..i].iter().any(|o| o.stem == m.stem) {
                return Err(Error::InvalidPlan(format!("stem `{}` masked twice", m.stem)));
            }
        }
        Ok(Self {
            masks,
            downsample_factor,
        })
    }

    /// No masked stems: the prefix is the plain downsampled grid.
    pub fn unmasked(downsample_factor: usize) -> Result<Self> {
        Self::new(Vec::new(), downsample_factor)
    }

    /// Whole stems, every stage masked.
    pub fn whole_stems<S: AsRef<str>>(stems: &[S], downsample_factor: usize) -> Result<Self> {
        Self::new(
            stems
                .iter()
                .map(|s| StemMask {
                    stem: s.as_ref().to_string(),
                    first_stage: 1,
                })
                .collect(),
            downsample_factor,
        )
    }

    /// Parses mask arguments such as `drums`, `other:3-4`, `other:3+` or
    /// `other:4`.
    pub fn parse<S: AsRef<str>>(args: &[S], layout: &LayoutSpec, downsample_factor: usize) -> Result<Self> {
        let mut masks = Vec::with_capacity(args.len());
        for arg in args {
            let arg = arg.as_ref();
            let (stem, range) = match arg.split_once(':') {
                Some((s, r)) => (s, Some(r)),
                None => (arg, None),
            };
            let n = layout.stems()[layout.stem_index(stem)?].n_streams();
            let first_stage = match range {
                None => 1,
                Some(r) => {
                    let n_str = n.to_string();
                    let (lo, hi) = match (r.strip_suffix('+'), r.split_once('-')) {
                        (Some(lo), _) => (lo, n_str.as_str()),
                        (None, Some((lo, hi))) => (lo, hi),
                        (None, None) => (r, r),
                    };
                    let parse = |x: &str| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidPlan(format!("bad stage range `{arg}`")))
                    };
                    let (lo, hi) = (parse(lo)?, parse(hi)?);
                    if hi != n || lo == 0 || lo > hi {
                        return Err(Error::InvalidPlan(format!(
                            "`{arg}`: masked stages must be a suffix ending at stage {n}"
                        )));
                    }
                    lo
                }
            };
            masks.push(StemMask {
                stem: stem.to_string(),
                first_stage,
            });
        }
        let plan = Self::new(masks, downsample_factor)?;
        plan.validate(layout)?;
        Ok(plan)
    }

    pub fn masks(&self) -> &[StemMask] {
        &self.masks
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    pub fn masked_stems(&self) -> impl Iterator<Item = &str> {
        self.masks.iter().map(|m| m.stem.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Masked stages of `stem` in descending order (`{4, 3}` style), empty
    /// when the stem is not masked.
    pub fn masked_stages(&self, layout: &LayoutSpec, stem: &str) -> Result<Vec<usize>> {
        let n = layout.stems()[layout.stem_index(stem)?].n_streams();
        Ok(self
            .masks
            .iter()
            .find(|m| m.stem == stem)
            .map(|m| (m.first_stage..=n).rev().collect())
            .unwrap_or_default())
    }

    pub fn validate(&self, layout: &LayoutSpec) -> Result<()> {
        for m in &self.masks {
            let idx = layout.stem_index(&m.stem)?;
            let n = layout.stems()[idx].n_streams();
            if m.first_stage == 0 || m.first_stage > n {
                return Err(Error::StageOutOfRange {
                    stem: m.stem.clone(),
                    stage: m.first_stage,
                    n_streams: n,
                });
            }
        }
        Ok(())
    }

    /// Training plans mask one or two stems.
    pub fn validate_for_training(&self, layout: &LayoutSpec) -> Result<()> {
        self.validate(layout)?;
        if !(1..=2).contains(&self.masks.len()) {
            return Err(Error::InvalidPlan(format!(
                "training plans mask 1 or 2 stems, got {}",
                self.masks.len()
            )));
        }
        Ok(())
    }

    /// Per-stream flags, true where the stream is masked.
    pub fn masked_streams(&self, layout: &LayoutSpec) -> Result<Vec<bool>> {
        self.validate(layout)?;
        let mut out = vec![false; layout.n_streams()];
        for m in &self.masks {
            let stem = layout.stem_index(&m.stem)?;
            for s in layout.stem_streams(stem).skip(m.first_stage - 1) {
                out[s] = true;
            }
        }
        Ok(out)
    }
}

impl fmt::Display for EditPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.masks.is_empty() {
            return write!(f, "(none)");
        }
        for (i, m) in self.masks.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            if m.first_stage == 1 {
                write!(f, "{}", m.stem)?;
            } else {
                write!(f, "{}:{}+", m.stem, m.first_stage)?;
            }
        }
        Ok(())
    }
}

/// One or two stems uniformly, chosen uniformly without replacement; a
/// multi-stream stem masks a stage suffix chosen uniformly among its
/// `n_streams` options.
pub fn sample_edit_plan<R: Rng + ?Sized>(layout: &LayoutSpec, downsample_factor: usize, rng: &mut R) -> EditPlan {
    let n_stems = layout.stems().len();
    let max_masked = n_stems.min(2);
    let count = rng.random_range(1..=max_masked);
    let mut chosen = index::sample(rng, n_stems, count).into_vec();
    chosen.sort_unstable();
    let masks = chosen
        .into_iter()
        .map(|i| {
            let stem = &layout.stems()[i];
            StemMask {
                stem: stem.name.clone(),
                first_stage: rng.random_range(1..=stem.n_streams()),
            }
        })
        .collect();
    EditPlan::new(masks, downsample_factor.max(1)).expect("sampled plan is well formed")
}

/// Keeps frames `0, factor, 2*factor, ...`; `floor(T / factor)` frames.
pub fn downsample_grid(grid: &TokenGrid, factor: usize) -> Result<TokenGrid> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if factor > grid.n_frames() {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} exceeds {} frames",
            grid.n_frames()
        )));
    }
    let n_out = grid.n_frames() / factor;
    let rows: Vec<Vec<Token>> = (0..grid.n_streams())
        .map(|s| grid.row(s).iter().step_by(factor).take(n_out).copied().collect())
        .collect();
    let layout = grid
        .layout()
        .with_frame_rate(grid.layout().frame_rate_hz() / factor as f64);
    TokenGrid::from_rows(layout, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Prefix,
    Body,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::Prefix => 0,
            Segment::Body => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    pub prefix: TokenGrid,
    pub body: TokenGrid,
    /// Row-major `S x (prefix + 1 + body)` over the concatenated sequence.
    pub loss_mask: Vec<bool>,
    pub downsample_factor: usize,
}

impl ConditioningSequence {
    pub fn concat_frames(&self) -> usize {
        self.prefix.n_frames() + 1 + self.body.n_frames()
    }

    /// `prefix ++ SEP ++ body` in the body's layout.
    pub fn concat(&self) -> TokenGrid {
        let layout = self.body.layout().clone();
        let rows: Vec<Vec<Token>> = (0..layout.n_streams())
            .map(|s| {
                let mut row = Vec::with_capacity(self.concat_frames());
                row.extend_from_slice(self.prefix.row(s));
                row.push(layout.special(s, Special::Sep));
                row.extend_from_slice(self.body.row(s));
                row
            })
            .collect();
        TokenGrid::from_rows(layout, &rows).expect("equal row lengths")
    }

    /// The delayed model input for this sequence.
    pub fn to_model_sequence(&self) -> ModelSequence {
        let n_prefix = self.prefix.n_frames();
        let concat = self.concat();
        let factor = self.downsample_factor as u32;
        let frame_info = |k: usize| -> (Segment, u32) {
            if k < n_prefix {
                (Segment::Prefix, k as u32 * factor)
            } else if k == n_prefix {
                (Segment::Prefix, n_prefix as u32 * factor)
            } else {
                (Segment::Body, (k - n_prefix - 1) as u32)
            }
        };
        ModelSequence::from_parts(&concat, &self.loss_mask, frame_info)
    }
}

/// Replaces masked prefix streams with `MASK` and joins prefix and body.
pub fn build_conditioning(body: &TokenGrid, plan: &EditPlan) -> Result<ConditioningSequence> {
    let masked = plan.masked_streams(body.layout())?;
    let mut prefix = downsample_grid(body, plan.downsample_factor())?;
    for (s, &m) in masked.iter().enumerate() {
        if m {
            let mask = body.layout().special(s, Special::Mask);
            prefix.row_mut(s).fill(mask);
        }
    }
    let n_prefix = prefix.n_frames();
    let total = n_prefix + 1 + body.n_frames();
    let mut loss_mask = vec![false; body.n_streams() * total];
    for s in 0..body.n_streams() {
        loss_mask[s * total + n_prefix + 1..(s + 1) * total].fill(true);
    }
    Ok(ConditioningSequence {
        prefix,
        body: body.clone(),
        loss_mask,
        downsample_factor: plan.downsample_factor(),
    })
}

/// A delayed token sequence with per-cell loss flags and per-frame segment
/// and time annotations, ready for the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSequence {
    pub grid: DelayedGrid,
    /// Row-major `S x L`; false on prefix, separator and padding cells.
    pub loss_mask: Vec<bool>,
    pub segments: Vec<Segment>,
    /// Time index (in body frames) used for positional encoding.
    pub times: Vec<u32>,
}

impl ModelSequence {
    /// A plain (non-editing) sequence over `body`.
    pub fn plain(body: &TokenGrid) -> Self {
        let mask = vec![true; body.tokens().len()];
        ModelSequence::from_parts(body, &mask, |k| (Segment::Body, k as u32))
    }

    /// Delays `grid` and its undelayed loss mask; `frame_info(k)` gives the
    /// segment and time of undelayed frame `k` (and is extrapolated into the
    /// tail padding).
    fn from_parts(grid: &TokenGrid, loss_mask: &[bool], frame_info: impl Fn(usize) -> (Segment, u32)) -> Self {
        let layout = grid.layout();
        let delayed = apply_delay(grid);
        let mask = delay_cells(layout, loss_mask, grid.n_frames(), |_| false);
        let n = grid.n_frames();
        let (segments, times) = (0..delayed.n_frames())
            .map(|k| {
                if k < n {
                    frame_info(k)
                } else {
                    let (seg, last) = frame_info(n - 1);
                    (seg, last + (k - n + 1) as u32)
                }
            })
            .unzip();
        ModelSequence {
            grid: delayed,
            loss_mask: mask,
            segments,
            times,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.n_frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> &LayoutSpec {
        self.grid.grid().layout()
    }

    pub fn n_loss_cells(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Crop lengths and task mix for training examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleConfig {
    /// Probability of an editing example (otherwise plain generation).
    pub p_edit: f64,
    /// Body frames of a plain example.
    pub plain_frames: usize,
    /// Body frames of an editing example.
    pub edit_frames: usize,
    pub downsample_factor: usize,
}

impl ExampleConfig {
    /// 30 s plain crops and 25 s edit crops at 50 Hz, prefix at 10 Hz.
    pub fn full_scale() -> Self {
        Self {
            p_edit: 0.5,
            plain_frames: 1500,
            edit_frames: 1250,
            downsample_factor: DEFAULT_DOWNSAMPLE_FACTOR,
        }
    }

    /// Same 6:5 crop ratio at a toy length.
    pub fn toy() -> Self {
        Self {
            p_edit: 0.5,
            plain_frames: 48,
            edit_frames: 40,
            downsample_factor: DEFAULT_DOWNSAMPLE_FACTOR,
        }
    }
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleKind {
    Plain,
    Edit(EditPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub sequence: ModelSequence,
    pub kind: ExampleKind,
}

/// Draws the task, crops from the start of `grid` and builds the delayed
/// model input.
pub fn assemble_training_example<R: Rng + ?Sized>(
    grid: &TokenGrid,
    cfg: &ExampleConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    if !(0.0..=1.0).contains(&cfg.p_edit) {
        return Err(Error::InvalidArgument(format!("p_edit {} outside [0, 1]", cfg.p_edit)));
    }
    if grid.n_frames() < cfg.downsample_factor.max(1) {
        return Err(Error::InvalidArgument(format!(
            "grid of {} frames is shorter than the downsample factor",
            grid.n_frames()
        )));
    }
    let edit = rng.random_bool(cfg.p_edit);
    let crop = if edit { cfg.edit_frames } else { cfg.plain_frames };
    if crop == 0 || grid.n_frames() < crop {
        return Err(Error::InvalidArgument(format!(
            "grid of {} frames is too short for a {crop}-frame crop",
            grid.n_frames()
        )));
    }
    let body = grid.slice_frames(0, crop)?;
    if edit {
        let plan = sample_edit_plan(grid.layout(), cfg.downsample_factor, rng);
        let cond = build_conditioning(&body, &plan)?;
        Ok(TrainingExample {
            sequence: cond.to_model_sequence(),
            kind: ExampleKind::Edit(plan),
        })
    } else {
        Ok(TrainingExample {
            sequence: ModelSequence::plain(&body),
            kind: ExampleKind::Plain,
        })
    }
}
