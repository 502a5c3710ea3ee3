use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All trainable arrays. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// Per-stream token embeddings, `vocab_s x d`.
    pub tok_emb: Vec<Array2<F>>,
    /// `(n_conditions + 1) x d`; the last row is the NULL condition.
    pub cond_emb: Array2<F>,
    /// `2 x d`: prefix, body.
    pub seg_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    /// Per-stream heads, `d x vocab_s`.
    pub head_w: Vec<Array2<F>>,
    pub head_b: Vec<Array1<F>>,
}

macro_rules! tensor_list {
    ($p:expr, $view:ident, $iter:ident) => {{
        let p = $p;
        let mut out = Vec::new();
        for (s, e) in p.tok_emb.$iter().enumerate() {
            out.push((format!("tok_emb.{s}"), e.$view().into_dyn()));
        }
        out.push(("cond_emb".to_string(), p.cond_emb.$view().into_dyn()));
        out.push(("seg_emb".to_string(), p.seg_emb.$view().into_dyn()));
        for (l, layer) in p.layers.$iter().enumerate() {
            out.push((format!("layers.{l}.ln1.g"), layer.ln1_g.$view().into_dyn()));
            out.push((format!("layers.{l}.ln1.b"), layer.ln1_b.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.wq"), layer.wq.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.bq"), layer.bq.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.wk"), layer.wk.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.bk"), layer.bk.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.wv"), layer.wv.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.bv"), layer.bv.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.wo"), layer.wo.$view().into_dyn()));
            out.push((format!("layers.{l}.attn.bo"), layer.bo.$view().into_dyn()));
            out.push((format!("layers.{l}.ln2.g"), layer.ln2_g.$view().into_dyn()));
            out.push((format!("layers.{l}.ln2.b"), layer.ln2_b.$view().into_dyn()));
            out.push((format!("layers.{l}.ff.w1"), layer.w1.$view().into_dyn()));
            out.push((format!("layers.{l}.ff.b1"), layer.b1.$view().into_dyn()));
            out.push((format!("layers.{l}.ff.w2"), layer.w2.$view().into_dyn()));
            out.push((format!("layers.{l}.ff.b2"), layer.b2.$view().into_dyn()));
        }
        out.push(("ln_f.g".to_string(), p.lnf_g.$view().into_dyn()));
        out.push(("ln_f.b".to_string(), p.lnf_b.$view().into_dyn()));
        for (s, w) in p.head_w.$iter().enumerate() {
            out.push((format!("head.{s}.w"), w.$view().into_dyn()));
        }
        for (s, b) in p.head_b.$iter().enumerate() {
            out.push((format!("head.{s}.b"), b.$view().into_dyn()));
        }
        out
    }};
}

fn normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z * std).unwrap()
    })
}

impl<F: Scalar> Params<F> {
    /// Zero-valued arrays with the shapes required by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_model * cfg.ff_mult;
        let layout = &cfg.layout;
        let z1 = |n| Array1::zeros(n);
        let z2 = |r, c| Array2::zeros((r, c));
        Self {
            tok_emb: (0..layout.n_streams()).map(|s| z2(layout.vocab_size(s), d)).collect(),
            cond_emb: z2(cfg.n_conditions + 1, d),
            seg_emb: z2(2, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1_g: z1(d),
                    ln1_b: z1(d),
                    wq: z2(d, d),
                    bq: z1(d),
                    wk: z2(d, d),
                    bk: z1(d),
                    wv: z2(d, d),
                    bv: z1(d),
                    wo: z2(d, d),
                    bo: z1(d),
                    ln2_g: z1(d),
                    ln2_b: z1(d),
                    w1: z2(d, ff),
                    b1: z1(ff),
                    w2: z2(ff, d),
                    b2: z1(d),
                })
                .collect(),
            lnf_g: z1(d),
            lnf_b: z1(d),
            head_w: (0..layout.n_streams()).map(|s| z2(d, layout.vocab_size(s))).collect(),
            head_b: (0..layout.n_streams()).map(|s| z1(layout.vocab_size(s))).collect(),
        }
    }

    /// Unit-variance embeddings, `1/sqrt(fan_in)` projections (residual
    /// outputs further scaled by `1/sqrt(2 * n_layers)`), identity norms.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let in_std = 1.0 / (d as f64).sqrt();
        let resid = 1.0 / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        for e in p.tok_emb.iter_mut() {
            *e = normal(rng, e.nrows(), d, 1.0);
        }
        p.cond_emb = normal(rng, cfg.n_conditions + 1, d, 1.0);
        p.seg_emb = normal(rng, 2, d, 1.0);
        for layer in p.layers.iter_mut() {
            layer.ln1_g.fill(F::one());
            layer.ln2_g.fill(F::one());
            layer.wq = normal(rng, d, d, in_std);
            layer.wk = normal(rng, d, d, in_std);
            layer.wv = normal(rng, d, d, in_std);
            layer.wo = normal(rng, d, d, in_std * resid);
            layer.w1 = normal(rng, d, ff, in_std);
            layer.w2 = normal(rng, ff, d, resid / (ff as f64).sqrt());
        }
        p.lnf_g.fill(F::one());
        if !cfg.zero_init_heads {
            for w in p.head_w.iter_mut() {
                *w = normal(rng, d, w.ncols(), in_std);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill_zero();
        out
    }

    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// Named views in a fixed order shared by every `Params` of one config.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        tensor_list!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        tensor_list!(self, view_mut, iter_mut)
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Scalar>(&self, cfg: &ModelConfig) -> Params<G> {
        let mut out = Params::<G>::zeros(cfg);
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, s| *d = G::from_f64(s.to_f64().unwrap()).unwrap());
        }
        out
    }
}
