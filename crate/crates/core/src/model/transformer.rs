use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{LayerParams, Params};
use super::{ModelConfig, ModelInput, Scalar};
use crate::error::{Error, Result};
use crate::layout::TokenGrid;

const LN_EPS: f64 = 1e-5;

pub(crate) fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

/// Sinusoidal encoding of a time index.
pub fn sinusoid<F: Scalar>(time: u32, d: usize) -> Array1<F> {
    Array1::from_shape_fn(d, |i| {
        let pair = (i / 2) * 2;
        let freq = 10000f64.powf(-(pair as f64) / d as f64);
        let angle = time as f64 * freq;
        cst(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub(crate) struct NormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Scalar>(x: ArrayView2<'_, F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let inv_d = cst::<F>(1.0 / d as f64);
    let eps = cst::<F>(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        let mut xh = xhat.row_mut(i);
        let mut yr = y.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xh[j] = h;
            yr[j] = h * g[j] + b[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = cst::<F>(1.0 / d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = Array1::zeros(d);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let v = dyr[j] * g[j];
            dxhat[j] = v;
            m1 += v;
            m2 += v * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(GELU_A);
    let half = cst::<F>(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(GELU_A);
    let half = cst::<F>(0.5);
    let three = cst::<F>(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

fn add_bias<F: Scalar>(m: &mut Array2<F>, b: &Array1<F>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

fn linear<F: Scalar>(x: ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    add_bias(&mut y, b);
    y
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and returns `dy w^T`.
fn linear_backward<F: Scalar>(
    x: ArrayView2<'_, F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct LayerCache<F> {
    pub norm1: NormCache<F>,
    pub a: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Attention probabilities per head, `n x n` (upper triangle zero).
    pub probs: Vec<Array2<F>>,
    pub o: Array2<F>,
    pub norm2: NormCache<F>,
    pub b: Array2<F>,
    pub h1: Array2<F>,
    pub g: Array2<F>,
}

/// Forward activations for one sequence.
pub struct Forward<F> {
    pub logits: Vec<Array2<F>>,
    pub(crate) layers: Vec<LayerCache<F>>,
    pub(crate) normf: NormCache<F>,
    pub(crate) hf: Array2<F>,
    pub(crate) tokens: TokenGrid,
    pub(crate) segments: Vec<usize>,
    pub(crate) cond_row: usize,
}

/// Slot embeddings before the first block: token sums (or the condition at
/// slot 0), plus time encoding, plus segment embedding.
pub fn input_embeddings<F: Scalar>(
    params: &Params<F>,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
    cond_row: usize,
) -> Array2<F> {
    let n = input.grid.n_frames();
    let d = cfg.d_model;
    let mut x = Array2::zeros((n, d));
    for t in 0..n {
        let mut row = x.row_mut(t);
        if t == 0 {
            row += &params.cond_emb.row(cond_row);
        } else {
            for (s, emb) in params.tok_emb.iter().enumerate() {
                row += &emb.row(input.grid.get(s, t - 1) as usize);
            }
        }
        row += &sinusoid::<F>(input.times[t], d);
        row += &params.seg_emb.row(input.segments[t].index());
    }
    x
}

fn causal_softmax_inplace<F: Scalar>(scores: &mut Array2<F>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let mut max = F::neg_infinity();
        for j in 0..=i {
            max = max.max(row[j]);
        }
        let mut sum = F::zero();
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        let inv = F::one() / sum;
        for j in 0..=i {
            row[j] *= inv;
        }
        for j in i + 1..n {
            row[j] = F::zero();
        }
    }
}

fn layer_forward<F: Scalar>(x: &mut Array2<F>, lp: &LayerParams<F>, cfg: &ModelConfig) -> LayerCache<F> {
    let dh = cfg.head_dim();
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let (a, norm1) = layer_norm(x.view(), &lp.ln1_g, &lp.ln1_b);
    let q = linear(a.view(), &lp.wq, &lp.bq);
    let k = linear(a.view(), &lp.wk, &lp.bk);
    let v = linear(a.view(), &lp.wv, &lp.bv);
    let n = x.nrows();
    let mut o = Array2::zeros((n, cfg.d_model));
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|z| z * scale);
        causal_softmax_inplace(&mut scores);
        let oh = scores.dot(&v.slice(cols));
        o.slice_mut(cols).assign(&oh);
        probs.push(scores);
    }
    let attn = linear(o.view(), &lp.wo, &lp.bo);
    *x += &attn;

    let (b, norm2) = layer_norm(x.view(), &lp.ln2_g, &lp.ln2_b);
    let h1 = linear(b.view(), &lp.w1, &lp.b1);
    let g = h1.mapv(gelu);
    let h2 = linear(g.view(), &lp.w2, &lp.b2);
    *x += &h2;

    LayerCache {
        norm1,
        a,
        q,
        k,
        v,
        probs,
        o,
        norm2,
        b,
        h1,
        g,
    }
}

pub(crate) fn forward<F: Scalar>(
    params: &Params<F>,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
    cond_row: usize,
) -> Forward<F> {
    let mut x = input_embeddings(params, cfg, input, cond_row);
    let layers = params.layers.iter().map(|lp| layer_forward(&mut x, lp, cfg)).collect();
    let (hf, normf) = layer_norm(x.view(), &params.lnf_g, &params.lnf_b);
    let logits = params
        .head_w
        .iter()
        .zip(&params.head_b)
        .map(|(w, b)| linear(hf.view(), w, b))
        .collect();
    Forward {
        logits,
        layers,
        normf,
        hf,
        tokens: input.grid.clone(),
        segments: input.segments.iter().map(|s| s.index()).collect(),
        cond_row,
    }
}

fn layer_backward<F: Scalar>(
    dx: &mut Array2<F>,
    lp: &LayerParams<F>,
    gp: &mut LayerParams<F>,
    cache: &LayerCache<F>,
    cfg: &ModelConfig,
) {
    let dh = cfg.head_dim();
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());

    // Feed-forward branch.
    let dgel = linear_backward(cache.g.view(), &lp.w2, dx, &mut gp.w2, &mut gp.b2);
    let mut dh1 = dgel;
    Zip::from(&mut dh1).and(&cache.h1).for_each(|d, &h| *d *= gelu_grad(h));
    let db_in = linear_backward(cache.b.view(), &lp.w1, &dh1, &mut gp.w1, &mut gp.b1);
    *dx += &layer_norm_backward(&db_in, &cache.norm2, &lp.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);

    // Attention branch.
    let d_o = linear_backward(cache.o.view(), &lp.wo, dx, &mut gp.wo, &mut gp.bo);
    let n = dx.nrows();
    let mut dq = Array2::zeros((n, cfg.d_model));
    let mut dk = Array2::zeros((n, cfg.d_model));
    let mut dv = Array2::zeros((n, cfg.d_model));
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let doh = d_o.slice(cols);
        let mut dp = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        for i in 0..n {
            let prow = p.row(i);
            let mut drow = dp.row_mut(i);
            let mut dot = F::zero();
            for j in 0..=i {
                dot += prow[j] * drow[j];
            }
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
            for j in i + 1..n {
                drow[j] = F::zero();
            }
        }
        dq.slice_mut(cols).assign(&dp.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dp.t().dot(&cache.q.slice(cols)));
    }
    let mut da = linear_backward(cache.a.view(), &lp.wq, &dq, &mut gp.wq, &mut gp.bq);
    da += &linear_backward(cache.a.view(), &lp.wk, &dk, &mut gp.wk, &mut gp.bk);
    da += &linear_backward(cache.a.view(), &lp.wv, &dv, &mut gp.wv, &mut gp.bv);
    *dx += &layer_norm_backward(&da, &cache.norm1, &lp.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b);
}

pub(crate) fn backward<F: Scalar>(
    params: &Params<F>,
    cfg: &ModelConfig,
    fwd: &Forward<F>,
    dlogits: &[Array2<F>],
    grads: &mut Params<F>,
) {
    let n = fwd.hf.nrows();
    let mut dhf = Array2::zeros((n, cfg.d_model));
    for s in 0..params.head_w.len() {
        dhf += &linear_backward(
            fwd.hf.view(),
            &params.head_w[s],
            &dlogits[s],
            &mut grads.head_w[s],
            &mut grads.head_b[s],
        );
    }
    let mut dx = layer_norm_backward(&dhf, &fwd.normf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
    for l in (0..params.layers.len()).rev() {
        layer_backward(&mut dx, &params.layers[l], &mut grads.layers[l], &fwd.layers[l], cfg);
    }
    for t in 0..n {
        let drow = dx.row(t);
        if t == 0 {
            let mut r = grads.cond_emb.row_mut(fwd.cond_row);
            r += &drow;
        } else {
            for s in 0..grads.tok_emb.len() {
                let tok = fwd.tokens.get(s, t - 1) as usize;
                let mut r = grads.tok_emb[s].row_mut(tok);
                r += &drow;
            }
        }
        let mut r = grads.seg_emb.row_mut(fwd.segments[t]);
        r += &drow;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Sum of cross-entropy over included cells (nats).
    pub sum: f64,
    pub count: usize,
    pub stream_sum: Vec<f64>,
    pub stream_count: Vec<usize>,
}

impl LossOutput {
    pub fn empty(n_streams: usize) -> Self {
        Self {
            sum: 0.0,
            count: 0,
            stream_sum: vec![0.0; n_streams],
            stream_count: vec![0; n_streams],
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn stream_means(&self) -> Vec<Option<f64>> {
        self.stream_sum
            .iter()
            .zip(&self.stream_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    pub fn merge(&mut self, other: &LossOutput) {
        self.sum += other.sum;
        self.count += other.count;
        for (a, b) in self.stream_sum.iter_mut().zip(&other.stream_sum) {
            *a += b;
        }
        for (a, b) in self.stream_count.iter_mut().zip(&other.stream_count) {
            *a += b;
        }
    }
}

fn log_softmax_at<F: Scalar>(row: ArrayView1<'_, F>, target: usize) -> (f64, f64, f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64().unwrap()));
    let sum: f64 = row.iter().map(|&x| (x.to_f64().unwrap() - max).exp()).sum();
    let lse = max + sum.ln();
    (row[target].to_f64().unwrap() - lse, max, sum)
}

/// Masked cross-entropy of `logits` against the delayed `targets`.
///
/// When `grad_scale` is given, also returns `grad_scale * dCE/dlogits`
/// summed over included cells (pass `1 / total_cells` for a batch mean).
pub fn cross_entropy<F: Scalar>(
    logits: &[Array2<F>],
    targets: &TokenGrid,
    mask: &[bool],
    grad_scale: Option<f64>,
) -> Result<(LossOutput, Option<Vec<Array2<F>>>)> {
    let n_streams = targets.n_streams();
    let n = targets.n_frames();
    if logits.len() != n_streams || mask.len() != n_streams * n {
        return Err(Error::DimensionMismatch {
            expected: n_streams * n,
            got: mask.len(),
        });
    }
    let mut out = LossOutput::empty(n_streams);
    let mut grads = grad_scale.map(|_| logits.iter().map(|l| Array2::<F>::zeros(l.dim())).collect::<Vec<_>>());
    for s in 0..n_streams {
        if logits[s].nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: logits[s].nrows(),
            });
        }
        for t in 0..n {
            if !mask[s * n + t] {
                continue;
            }
            let target = targets.get(s, t) as usize;
            let row = logits[s].row(t);
            if target >= row.len() {
                return Err(Error::InvalidGrid(format!(
                    "target {target} outside vocabulary of stream {s}"
                )));
            }
            let (lp, max, sum) = log_softmax_at(row, target);
            out.sum -= lp;
            out.stream_sum[s] -= lp;
            out.count += 1;
            out.stream_count[s] += 1;
            if let (Some(g), Some(scale)) = (grads.as_mut(), grad_scale) {
                let mut grow = g[s].row_mut(t);
                for (j, &x) in row.iter().enumerate() {
                    let p = (x.to_f64().unwrap() - max).exp() / sum;
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    grow[j] = cst(scale * (p - onehot));
                }
            }
        }
    }
    if out.count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((out, grads))
}
