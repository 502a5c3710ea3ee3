//! Decoder-only transformer over `S` parallel token streams.
//!
//! Slot `t` of the model input predicts frame `t` of the delayed sequence.
//! Slot 0 carries the condition embedding; slot `t > 0` carries the sum of
//! the per-stream token embeddings of frame `t - 1`. Every slot also gets a
//! sinusoidal encoding of the target frame's time index and a learned
//! segment embedding (prefix or body). One classification head per stream
//! reads the final hidden state.

mod checkpoint;
mod decode;
mod params;
mod transformer;

use std::fmt::Debug;

use ndarray::{Array2, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_meta, read_model, write_checkpoint, CheckpointMeta, ModelCheckpoint, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decode::{DecodeState, SlotInput};
pub use params::{LayerParams, Params};
pub use transformer::{cross_entropy, input_embeddings, sinusoid, Forward, LossOutput};

use crate::edit::{ModelSequence, Segment};
use crate::error::{Error, Result};
use crate::layout::{LayoutSpec, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(DType::F32),
            64 => Ok(DType::F64),
            other => Err(Error::InvalidArgument(format!(
                "precision must be 32 or 64, got {other}"
            ))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            DType::F32 => 32,
            DType::F64 => 64,
        }
    }
}

/// Floating-point element type of a model.
pub trait Scalar: NdFloat + FromPrimitive + Default + Debug {
    const DTYPE: DType;

    fn to_le_bytes_vec(xs: &[Self]) -> Vec<u8>;
    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn to_le_bytes_vec(xs: &[Self]) -> Vec<u8> {
        xs.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn to_le_bytes_vec(xs: &[Self]) -> Vec<u8> {
        xs.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: LayoutSpec,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Real condition ids are `0..n_conditions`; `n_conditions` is NULL.
    pub n_conditions: usize,
    pub condition_dropout: f64,
    /// Longest delayed sequence the model accepts.
    pub max_frames: usize,
    pub zero_init_heads: bool,
}

impl ModelConfig {
    pub fn new(layout: LayoutSpec, n_conditions: usize) -> Self {
        Self {
            layout,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            n_conditions,
            condition_dropout: 0.1,
            max_frames: 1024,
            zero_init_heads: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return bad(format!("condition_dropout {} outside [0, 1]", self.condition_dropout));
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        Ok(())
    }

    pub fn null_condition(&self) -> usize {
        self.n_conditions
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A condition id or the NULL (unconditional) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Id(usize),
    Null,
}

impl Condition {
    pub fn from_option(id: Option<usize>) -> Self {
        id.map_or(Condition::Null, Condition::Id)
    }
}

/// Inputs for one forward pass over a delayed sequence.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub grid: &'a TokenGrid,
    pub segments: &'a [Segment],
    pub times: &'a [u32],
    pub condition: Condition,
}

impl<'a> ModelInput<'a> {
    pub fn from_sequence(seq: &'a ModelSequence, condition: Condition) -> Self {
        Self {
            grid: seq.grid.grid(),
            segments: &seq.segments,
            times: &seq.times,
            condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Row index of the condition embedding table.
    pub fn condition_row(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Null => Ok(self.config.null_condition()),
            Condition::Id(id) if id < self.config.n_conditions => Ok(id),
            Condition::Id(id) => Err(Error::UnknownCondition {
                id,
                n: self.config.n_conditions,
            }),
        }
    }

    /// The condition embedding; NULL is substituted when `dropout_active`.
    pub fn condition_embed(&self, condition: Condition, dropout_active: bool) -> Result<ndarray::Array1<F>> {
        let row = self.condition_row(condition)?;
        let row = if dropout_active {
            self.config.null_condition()
        } else {
            row
        };
        Ok(self.params.cond_emb.row(row).to_owned())
    }

    /// Applies condition dropout with probability `condition_dropout`.
    pub fn drop_condition<R: Rng + ?Sized>(&self, condition: Condition, rng: &mut R) -> Condition {
        if rng.random_bool(self.config.condition_dropout) {
            Condition::Null
        } else {
            condition
        }
    }

    pub(crate) fn check_input(&self, input: &ModelInput<'_>) -> Result<usize> {
        let n = input.grid.n_frames();
        if n > self.config.max_frames {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_frames,
            });
        }
        if !input.grid.layout().same_structure(&self.config.layout) {
            return Err(Error::LayoutMismatch(
                "input layout differs from the model layout".into(),
            ));
        }
        if input.segments.len() != n || input.times.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: input.segments.len().min(input.times.len()),
            });
        }
        for s in 0..input.grid.n_streams() {
            let vocab = self.config.layout.vocab_size(s) as u32;
            if let Some(t) = input.grid.row(s).iter().position(|&tok| tok >= vocab) {
                return Err(Error::InvalidGrid(format!(
                    "token out of vocabulary at stream {s}, frame {t}"
                )));
            }
        }
        self.condition_row(input.condition)
    }

    /// Per-stream logits, each `L x vocab_s`.
    pub fn forward(&self, input: &ModelInput<'_>) -> Result<Vec<Array2<F>>> {
        Ok(self.forward_train(input)?.logits)
    }

    /// Forward pass retaining activations for [`Model::backward`].
    pub fn forward_train(&self, input: &ModelInput<'_>) -> Result<Forward<F>> {
        let cond = self.check_input(input)?;
        Ok(transformer::forward(&self.params, &self.config, input, cond))
    }

    /// Accumulates parameter gradients for upstream logit gradients.
    pub fn backward(&self, fwd: &Forward<F>, dlogits: &[Array2<F>], grads: &mut Params<F>) {
        transformer::backward(&self.params, &self.config, fwd, dlogits, grads);
    }

    pub fn decode_state(&self, capacity: usize) -> DecodeState<F> {
        DecodeState::new(&self.config, capacity)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
        }
    }
}

/// A model of either precision.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }
}
