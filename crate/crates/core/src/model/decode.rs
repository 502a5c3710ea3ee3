use ndarray::{s, Array1, Array2, Axis};

use super::transformer::{cst, gelu, layer_norm, sinusoid};
use super::{Condition, Model, ModelConfig, Scalar};
use crate::edit::Segment;
use crate::error::{Error, Result};
use crate::layout::Token;

/// Cached keys and values for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    len: usize,
}

/// Input of one decoding slot: the previous frame's tokens (absent for
/// slot 0, which carries the condition) and the target frame annotations.
#[derive(Debug, Clone, Copy)]
pub struct SlotInput<'a> {
    pub prev_tokens: Option<&'a [Token]>,
    pub condition: Condition,
    pub segment: Segment,
    pub time: u32,
}

impl<F: Scalar> DecodeState<F> {
    pub fn new(cfg: &ModelConfig, capacity: usize) -> Self {
        let shape = (capacity, cfg.d_model);
        Self {
            keys: (0..cfg.n_layers).map(|_| Array2::zeros(shape)).collect(),
            values: (0..cfg.n_layers).map(|_| Array2::zeros(shape)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn capacity(&self) -> usize {
        self.keys.first().map_or(0, Array2::nrows)
    }
}

impl<F: Scalar> Model<F> {
    /// Runs one slot through the network, appending to the cache, and
    /// returns per-stream logits for that slot.
    pub fn decode_step(&self, state: &mut DecodeState<F>, slot: SlotInput<'_>) -> Result<Vec<Array1<F>>> {
        let cfg = &self.config;
        let pos = state.len;
        if pos >= cfg.max_frames {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: cfg.max_frames,
            });
        }
        if pos >= state.capacity() {
            return Err(Error::InvalidArgument("decode cache is full".into()));
        }
        let p = &self.params;
        let d = cfg.d_model;
        let mut x = Array1::<F>::zeros(d);
        match slot.prev_tokens {
            None => x += &p.cond_emb.row(self.condition_row(slot.condition)?),
            Some(tokens) => {
                if tokens.len() != cfg.layout.n_streams() {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.layout.n_streams(),
                        got: tokens.len(),
                    });
                }
                for (s, &tok) in tokens.iter().enumerate() {
                    if tok as usize >= cfg.layout.vocab_size(s) {
                        return Err(Error::InvalidGrid(format!(
                            "token {tok} outside vocabulary of stream {s}"
                        )));
                    }
                    x += &p.tok_emb[s].row(tok as usize);
                }
            }
        }
        x += &sinusoid::<F>(slot.time, d);
        x += &p.seg_emb.row(slot.segment.index());
        let mut x = x.insert_axis(Axis(0));

        let dh = cfg.head_dim();
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        for (l, lp) in p.layers.iter().enumerate() {
            let (a, _) = layer_norm(x.view(), &lp.ln1_g, &lp.ln1_b);
            let mut q = a.dot(&lp.wq);
            q += &lp.bq;
            let mut k = a.dot(&lp.wk);
            k += &lp.bk;
            let mut v = a.dot(&lp.wv);
            v += &lp.bv;
            state.keys[l].row_mut(pos).assign(&k.row(0));
            state.values[l].row_mut(pos).assign(&v.row(0));
            let keys = state.keys[l].slice(s![..=pos, ..]);
            let values = state.values[l].slice(s![..=pos, ..]);
            let mut o = Array1::<F>::zeros(d);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![0, cols.clone()]);
                let mut scores: Array1<F> = keys.slice(s![.., cols.clone()]).dot(&qh);
                scores.mapv_inplace(|z| z * scale);
                let max = scores.fold(F::neg_infinity(), |m, &z| m.max(z));
                scores.mapv_inplace(|z| (z - max).exp());
                let sum = scores.sum();
                scores.mapv_inplace(|z| z / sum);
                let oh: Array1<F> = values.slice(s![.., cols.clone()]).t().dot(&scores);
                o.slice_mut(s![cols]).assign(&oh);
            }
            let mut attn = o.insert_axis(Axis(0)).dot(&lp.wo);
            attn += &lp.bo;
            x += &attn;
            let (b, _) = layer_norm(x.view(), &lp.ln2_g, &lp.ln2_b);
            let mut h1 = b.dot(&lp.w1);
            h1 += &lp.b1;
            let g = h1.mapv(gelu);
            let mut h2 = g.dot(&lp.w2);
            h2 += &lp.b2;
            x += &h2;
        }
        state.len += 1;
        let (hf, _) = layer_norm(x.view(), &p.lnf_g, &p.lnf_b);
        let hf = hf.row(0);
        Ok(p.head_w
            .iter()
            .zip(&p.head_b)
            .map(|(w, b)| {
                let mut l = hf.dot(w);
                l += b;
                l
            })
            .collect())
    }
}
