//! Autoregressive decoding in the delayed domain: unconditional or
//! conditional generation, and forced or free stem editing.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delay::{remove_delay, DelayedGrid};
use crate::edit::{build_conditioning, EditPlan, ModelSequence};
use crate::error::{Error, Result};
use crate::layout::{LayoutSpec, Special, Token, TokenGrid};
use crate::model::{Condition, DecodeState, Model, Scalar, SlotInput};
use crate::rvq::{rvq_encode, CodebookSet, FrameSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_k: usize,
    /// Classifier-free guidance scale; `None` disables guidance. Ignored
    /// for the NULL condition.
    pub cfg_scale: Option<f64>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 250,
            cfg_scale: Some(3.0),
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if let Some(s) = self.cfg_scale {
            if !s.is_finite() {
                return Err(Error::InvalidArgument("cfg_scale must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditMode {
    /// Unmasked streams are pinned to the source tokens.
    Forced,
    /// Every body stream is sampled.
    Free,
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forced" => Ok(EditMode::Forced),
            "free" => Ok(EditMode::Free),
            other => Err(Error::InvalidArgument(format!("unknown edit mode `{other}`"))),
        }
    }
}

/// Samples one token from `logits` restricted to the first `n_valid` ids.
pub fn sample_token<F: Scalar, R: Rng + ?Sized>(
    logits: &Array1<F>,
    n_valid: usize,
    params: &DecodeParams,
    rng: &mut R,
) -> Token {
    let mut order: Vec<(f64, usize)> = logits
        .iter()
        .take(n_valid)
        .enumerate()
        .map(|(i, &x)| (x.to_f64().unwrap(), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.truncate(params.top_k.min(n_valid));
    let max = order[0].0;
    let weights: Vec<f64> = order
        .iter()
        .map(|&(x, _)| ((x - max) / params.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, &(_, id)) in weights.iter().zip(&order) {
        if u < *w {
            return id as Token;
        }
        u -= w;
    }
    // Rounding left `u` past the end; the most likely ids carry the mass.
    order[0].1 as Token
}

/// Decodes `template` slot by slot. Cells flagged in `sample` are drawn from
/// the model; every other cell keeps its template token.
fn decode_sequence<F: Scalar>(
    model: &Model<F>,
    template: &ModelSequence,
    sample: &[bool],
    condition: Condition,
    params: &DecodeParams,
    rng: &mut ChaCha8Rng,
) -> Result<DelayedGrid> {
    params.validate()?;
    model.condition_row(condition)?;
    let layout = template.layout().clone();
    let n = template.len();
    if n > model.config.max_frames {
        return Err(Error::SequenceTooLong {
            len: n,
            max: model.config.max_frames,
        });
    }
    if !layout.same_structure(&model.config.layout) {
        return Err(Error::LayoutMismatch(
            "source layout differs from the model layout".into(),
        ));
    }
    let guidance = match (condition, params.cfg_scale) {
        (Condition::Id(_), Some(s)) => Some(s),
        _ => None,
    };
    let mut grid = template.grid.grid().clone();
    let n_streams = grid.n_streams();
    let mut cond_state = model.decode_state(n);
    let mut null_state: Option<DecodeState<F>> = guidance.map(|_| model.decode_state(n));
    let mut prev: Vec<Token> = vec![0; n_streams];
    for k in 0..n {
        let slot = |condition| SlotInput {
            prev_tokens: (k > 0).then_some(prev.as_slice()),
            condition,
            segment: template.segments[k],
            time: template.times[k],
        };
        let mut logits = model.decode_step(&mut cond_state, slot(condition))?;
        if let (Some(scale), Some(state)) = (guidance, null_state.as_mut()) {
            let uncond = model.decode_step(state, slot(Condition::Null))?;
            let s = F::from_f64(scale).unwrap();
            for (c, u) in logits.iter_mut().zip(&uncond) {
                ndarray::Zip::from(c).and(u).for_each(|c, &u| *c = u + s * (*c - u));
            }
        }
        for s in 0..n_streams {
            if sample[s * n + k] {
                let tok = sample_token(&logits[s], layout.codebook_size(s) as usize, params, rng);
                grid.set(s, k, tok);
            }
            prev[s] = grid.get(s, k);
        }
    }
    Ok(DelayedGrid::from_grid(grid))
}

/// Samples `n_frames` of all streams; `Condition::Null` is unconditional.
pub fn generate<F: Scalar>(
    model: &Model<F>,
    condition: Condition,
    n_frames: usize,
    params: &DecodeParams,
    seed: u64,
) -> Result<TokenGrid> {
    let layout = &model.config.layout;
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be >= 1".into()));
    }
    if n_frames + layout.max_delay() > model.config.max_frames {
        return Err(Error::SequenceTooLong {
            len: n_frames + layout.max_delay(),
            max: model.config.max_frames,
        });
    }
    let blank = TokenGrid::filled(layout.clone(), n_frames, 0);
    let template = ModelSequence::plain(&blank);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = decode_sequence(model, &template, &template.loss_mask, condition, params, &mut rng)?;
    remove_delay(&out)
}

/// Regenerates the masked streams of `source` given its masked 10 Hz-style
/// prefix. Returns the edited body, same shape as `source`.
pub fn edit<F: Scalar>(
    model: &Model<F>,
    source: &TokenGrid,
    plan: &EditPlan,
    condition: Condition,
    mode: EditMode,
    params: &DecodeParams,
    seed: u64,
) -> Result<TokenGrid> {
    if !source.layout().same_structure(&model.config.layout) {
        return Err(Error::LayoutMismatch(
            "source layout differs from the model layout".into(),
        ));
    }
    plan.validate(source.layout())?;
    let masked = plan.masked_streams(source.layout())?;
    for s in 0..source.n_streams() {
        let bad = source.row(s).iter().any(|&t| {
            !source.layout().is_codebook_token(s, t) && !(masked[s] && t == source.layout().special(s, Special::Mask))
        });
        if bad {
            return Err(Error::InvalidGrid(format!(
                "source stream {s} holds a non-codebook token"
            )));
        }
    }
    let cond = build_conditioning(source, plan)?;
    let n_prefix = cond.prefix.n_frames();
    let template = cond.to_model_sequence();
    let n = template.len();
    let sample: Vec<bool> = (0..source.n_streams() * n)
        .map(|i| template.loss_mask[i] && (mode == EditMode::Free || masked[i / n]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = decode_sequence(model, &template, &sample, condition, params, &mut rng)?;
    remove_delay(&out)?.slice_frames(n_prefix + 1, n_prefix + 1 + source.n_frames())
}

/// Token grid of externally provided stems plus the names of the stems
/// that were absent (filled with `MASK`, to be masked in the edit plan).
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalTokens {
    pub grid: TokenGrid,
    pub absent: Vec<String>,
}

impl ExternalTokens {
    /// Plan masking every absent stem.
    pub fn edit_plan(&self, downsample_factor: usize) -> Result<EditPlan> {
        let plan = EditPlan::whole_stems(&self.absent, downsample_factor)?;
        plan.validate(self.grid.layout())?;
        Ok(plan)
    }
}

/// Encodes the provided stems with their fitted codebooks.
pub fn tokenize_external(
    layout: &LayoutSpec,
    stems: &[(&str, &FrameSequence)],
    codebooks: &[(&str, &CodebookSet)],
) -> Result<ExternalTokens> {
    if stems.is_empty() {
        return Err(Error::InvalidArgument("no stems provided".into()));
    }
    let n_frames = stems[0].1.len();
    if n_frames == 0 {
        return Err(Error::InvalidArgument("empty stem".into()));
    }
    let mut grid = TokenGrid::filled(layout.clone(), n_frames, 0);
    for s in 0..layout.n_streams() {
        grid.row_mut(s).fill(layout.special(s, Special::Mask));
    }
    let mut present = vec![false; layout.stems().len()];
    for &(name, frames) in stems {
        let idx = layout.stem_index(name)?;
        if present[idx] {
            return Err(Error::InvalidArgument(format!("stem `{name}` provided twice")));
        }
        if frames.len() != n_frames {
            return Err(Error::DimensionMismatch {
                expected: n_frames,
                got: frames.len(),
            });
        }
        let set = codebooks
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::InvalidArgument(format!("no codebooks for stem `{name}`")))?;
        let spec = &layout.stems()[idx];
        if set.n_stages() != spec.n_streams() || spec.codebook_sizes.iter().any(|&c| c as usize != set.codebook_size())
        {
            return Err(Error::LayoutMismatch(format!(
                "codebooks for `{name}` do not match the layout"
            )));
        }
        let tokens = rvq_encode(frames, set)?;
        for (stage, s) in layout.stem_streams(idx).enumerate() {
            grid.row_mut(s).copy_from_slice(tokens.row(stage));
        }
        present[idx] = true;
    }
    let absent = layout
        .stems()
        .iter()
        .zip(&present)
        .filter(|(_, &p)| !p)
        .map(|(s, _)| s.name.clone())
        .collect();
    Ok(ExternalTokens { grid, absent })
}
