//! Toy residual vector quantizer: one token stream per stage.
//!
//! Stage `s` quantizes the residual left by stages `< s`. Stages after the
//! first keep codeword 0 pinned at the origin, so adding a stage never
//! increases the per-frame reconstruction error.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::layout::{make_layout, DelayRule, StemSpec, Token, TokenGrid, AUDIO_FRAME_RATE_HZ};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"STEMRVQ\0";
pub const CODEBOOK_VERSION: u16 = 1;
pub const DEFAULT_KMEANS_ITERATIONS: usize = 10;

/// `T x dim` real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    dim: usize,
    frame_rate_hz: f64,
    data: Vec<f64>,
}

impl FrameSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form frames of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite frame value".into()));
        }
        Ok(Self {
            dim,
            frame_rate_hz: AUDIO_FRAME_RATE_HZ,
            data,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidArgument("ragged frames".into()));
        }
        Self::new(dim, frames.concat())
    }

    pub fn with_frame_rate(mut self, hz: f64) -> Self {
        self.frame_rate_hz = hz;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mean squared error per value against another sequence of equal shape.
    pub fn mse(&self, other: &FrameSequence) -> Result<f64> {
        if self.dim != other.dim || self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    n_stages: usize,
    codebook_size: usize,
    dim: usize,
    codewords: Vec<f64>,
}

impl CodebookSet {
    pub fn new(n_stages: usize, codebook_size: usize, dim: usize, codewords: Vec<f64>) -> Result<Self> {
        if n_stages == 0 || codebook_size < 2 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad codebook shape ({n_stages}, {codebook_size}, {dim})"
            )));
        }
        if codewords.len() != n_stages * codebook_size * dim {
            return Err(Error::DimensionMismatch {
                expected: n_stages * codebook_size * dim,
                got: codewords.len(),
            });
        }
        if codewords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite codeword".into()));
        }
        Ok(Self {
            n_stages,
            codebook_size,
            dim,
            codewords,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, stage: usize, code: usize) -> &[f64] {
        let start = (stage * self.codebook_size + code) * self.dim;
        &self.codewords[start..start + self.dim]
    }

    fn stage(&self, stage: usize) -> &[f64] {
        let n = self.codebook_size * self.dim;
        &self.codewords[stage * n..(stage + 1) * n]
    }

    /// Single-stem layout named `stem` with one stream per stage.
    pub fn layout(&self, stem: &str, frame_rate_hz: f64) -> Result<crate::layout::LayoutSpec> {
        make_layout(
            vec![StemSpec::uniform(stem, self.n_stages, self.codebook_size as u32)],
            frame_rate_hz,
            DelayRule::ResidualStages,
        )
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest codeword; ties go to the lowest id.
fn nearest(codebook: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codebook.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Encodes frames into a single-stem grid named `"rvq"`.
pub fn rvq_encode(frames: &FrameSequence, codebooks: &CodebookSet) -> Result<TokenGrid> {
    if frames.dim() != codebooks.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebooks.dim(),
            got: frames.dim(),
        });
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to encode".into()));
    }
    let t_len = frames.len();
    let dim = frames.dim();
    let mut tokens = vec![0 as Token; codebooks.n_stages() * t_len];
    let mut residual = vec![0.0; dim];
    for t in 0..t_len {
        residual.copy_from_slice(frames.frame(t));
        for s in 0..codebooks.n_stages() {
            let code = nearest(codebooks.stage(s), dim, &residual);
            tokens[s * t_len + t] = code as Token;
            for (r, c) in residual.iter_mut().zip(codebooks.codeword(s, code)) {
                *r -= c;
            }
        }
    }
    let layout = codebooks.layout("rvq", frames.frame_rate_hz())?;
    TokenGrid::new(layout, t_len, tokens)
}

pub fn rvq_decode(grid: &TokenGrid, codebooks: &CodebookSet) -> Result<FrameSequence> {
    rvq_decode_stages(grid, codebooks, codebooks.n_stages())
}

/// Decodes using only the first `n_used` stages.
pub fn rvq_decode_stages(grid: &TokenGrid, codebooks: &CodebookSet, n_used: usize) -> Result<FrameSequence> {
    if grid.n_streams() != codebooks.n_stages() {
        return Err(Error::DimensionMismatch {
            expected: codebooks.n_stages(),
            got: grid.n_streams(),
        });
    }
    if n_used > codebooks.n_stages() {
        return Err(Error::InvalidArgument(format!(
            "{n_used} stages requested, codebook has {}",
            codebooks.n_stages()
        )));
    }
    let dim = codebooks.dim();
    let mut data = vec![0.0; grid.n_frames() * dim];
    for s in 0..n_used {
        for (t, &tok) in grid.row(s).iter().enumerate() {
            if tok as usize >= codebooks.codebook_size() {
                return Err(Error::InvalidGrid(format!(
                    "token {tok} at stream {s}, frame {t} is not a codeword id"
                )));
            }
            let cw = codebooks.codeword(s, tok as usize);
            for (x, c) in data[t * dim..(t + 1) * dim].iter_mut().zip(cw) {
                *x += c;
            }
        }
    }
    Ok(FrameSequence::new(dim, data)?.with_frame_rate(grid.layout().frame_rate_hz()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Training-set reconstruction MSE after each stage.
    pub stage_mse: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub n_stages: usize,
    pub codebook_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(n_stages: usize, codebook_size: usize, seed: u64) -> Self {
        Self {
            n_stages,
            codebook_size,
            iterations: DEFAULT_KMEANS_ITERATIONS,
            seed,
        }
    }
}

/// Stage-wise k-means on successive residuals.
pub fn fit_codebooks(frames: &FrameSequence, opts: FitOptions) -> Result<(CodebookSet, FitReport)> {
    let FitOptions {
        n_stages,
        codebook_size: k,
        iterations,
        seed,
    } = opts;
    if n_stages == 0 || k < 2 {
        return Err(Error::InvalidArgument(format!(
            "bad fit shape ({n_stages} stages, {k} codes)"
        )));
    }
    if frames.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} frames is fewer than the codebook size {k}",
            frames.len()
        )));
    }
    let dim = frames.dim();
    let n = frames.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = frames.as_slice().to_vec();
    let mut codewords = Vec::with_capacity(n_stages * k * dim);
    let mut stage_mse = Vec::with_capacity(n_stages);
    let mut degenerate = false;

    for stage in 0..n_stages {
        let pinned_zero = stage > 0;
        let (book, stage_degenerate) = kmeans(&residual, dim, k, iterations, pinned_zero, &mut rng);
        degenerate |= stage_degenerate;
        let mut sse = 0.0;
        for x in residual.chunks_exact_mut(dim) {
            let code = nearest(&book, dim, x);
            for (r, c) in x.iter_mut().zip(&book[code * dim..(code + 1) * dim]) {
                *r -= c;
            }
            sse += x.iter().map(|r| r * r).sum::<f64>();
        }
        stage_mse.push(sse / (n * dim) as f64);
        codewords.extend_from_slice(&book);
    }
    if degenerate {
        warn!("degenerate training frames: fell back to single-cluster codebooks");
    }
    let set = CodebookSet::new(n_stages, k, dim, codewords)?;
    Ok((set, FitReport { stage_mse, degenerate }))
}

fn kmeans(
    data: &[f64],
    dim: usize,
    k: usize,
    iterations: usize,
    pinned_zero: bool,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, bool) {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let first_free = usize::from(pinned_zero);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut book = vec![0.0; k * dim];
    let mut filled = first_free;
    for &i in &order {
        if filled == k {
            break;
        }
        let p = point(i);
        let dup = (0..filled).any(|c| book[c * dim..(c + 1) * dim] == *p);
        if !dup {
            book[filled * dim..(filled + 1) * dim].copy_from_slice(p);
            filled += 1;
        }
    }
    let degenerate = filled <= first_free.max(1);
    if filled < k {
        // Fewer distinct points than codes: repeat existing codewords. Ties go
        // to the lowest id, so the copies are never selected.
        let src = if filled == 0 {
            book[..dim].to_vec()
        } else {
            book[(filled - 1) * dim..filled * dim].to_vec()
        };
        for c in filled..k {
            book[c * dim..(c + 1) * dim].copy_from_slice(&src);
        }
        return (book, degenerate);
    }

    let mut assign = vec![0usize; n];
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(&book, dim, point(i));
        }
        sums.iter_mut().for_each(|x| *x = 0.0);
        counts.iter_mut().for_each(|x| *x = 0);
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in first_free..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (b, s) in book[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *b = s * inv;
            }
        }
    }
    (book, degenerate)
}

pub fn encode_codebooks(set: &CodebookSet) -> Vec<u8> {
    let mut w = Writer::new(Vec::new());
    (|| -> std::io::Result<()> {
        w.bytes(CODEBOOK_MAGIC)?;
        w.u16(CODEBOOK_VERSION)?;
        w.u32(set.n_stages as u32)?;
        w.u32(set.codebook_size as u32)?;
        w.u32(set.dim as u32)?;
        for &x in &set.codewords {
            w.f64(x)?;
        }
        Ok(())
    })()
    .expect("writing to a Vec cannot fail");
    w.into_inner()
}

pub fn decode_codebooks(bytes: &[u8]) -> std::result::Result<CodebookSet, String> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CODEBOOK_MAGIC)?;
    let version = r.u16()?;
    if version != CODEBOOK_VERSION {
        return Err(format!("unsupported codebook version {version}"));
    }
    let n_stages = r.u32()? as usize;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let count = n_stages
        .checked_mul(k)
        .and_then(|x| x.checked_mul(dim))
        .ok_or("codebook shape overflows")?;
    let raw = r.take(count.checked_mul(8).ok_or("codebook shape overflows")?)?;
    r.finish()?;
    let codewords = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    CodebookSet::new(n_stages, k, dim, codewords).map_err(|e| e.to_string())
}

pub fn write_codebooks(path: impl AsRef<Path>, set: &CodebookSet) -> Result<()> {
    fs::write(path, encode_codebooks(set))?;
    Ok(())
}

pub fn read_codebooks(path: impl AsRef<Path>) -> Result<CodebookSet> {
    let path = path.as_ref();
    decode_codebooks(&fs::read(path)?).map_err(|msg| Error::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_point_book() -> CodebookSet {
        CodebookSet::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn nearest_neighbour_by_hand() {
        let f = FrameSequence::from_frames(&[vec![0.9, 1.1]]).unwrap();
        let g = rvq_encode(&f, &two_point_book()).unwrap();
        assert_eq!(g.get(0, 0), 1);
        let rec = rvq_decode(&g, &two_point_book()).unwrap();
        // residual (-0.1, 0.1)
        assert!((f.frame(0)[0] - rec.frame(0)[0] + 0.1).abs() < 1e-12);
        assert!((f.frame(0)[1] - rec.frame(0)[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_codeword_is_lossless() {
        let f = FrameSequence::from_frames(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let g = rvq_encode(&f, &two_point_book()).unwrap();
        assert_eq!(g.row(0), &[1, 0]);
        assert_eq!(rvq_decode(&g, &two_point_book()).unwrap(), f);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let f = FrameSequence::from_frames(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(rvq_encode(&f, &two_point_book()).unwrap().get(0, 0), 0);
    }

    #[test]
    fn second_stage_captures_residual_exactly() {
        // stage 1 maps (0.9, 1.1) to (1, 1); stage 2 holds the residual (-0.1, 0.1).
        let set = CodebookSet::new(2, 2, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -0.1, 0.1]).unwrap();
        let f = FrameSequence::from_frames(&[vec![0.9, 1.1]]).unwrap();
        let g = rvq_encode(&f, &set).unwrap();
        assert_eq!((g.get(0, 0), g.get(1, 0)), (1, 1));
        let rec = rvq_decode(&g, &set).unwrap();
        assert!(rec.mse(&f).unwrap() < 1e-24);
    }

    #[test]
    fn all_zero_codes_sum_codeword_zero() {
        let set = CodebookSet::new(2, 2, 1, vec![3.0, 9.0, 0.5, 7.0]).unwrap();
        let layout = set.layout("rvq", 50.0).unwrap();
        let g = TokenGrid::filled(layout, 3, 0);
        let rec = rvq_decode(&g, &set).unwrap();
        assert_eq!(rec.as_slice(), &[3.5, 3.5, 3.5]);
    }

    #[test]
    fn decode_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (stages, k, dim, t) = (3, 5, 4, 17);
        let words: Vec<f64> = (0..stages * k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set = CodebookSet::new(stages, k, dim, words.clone()).unwrap();
        let codes: Vec<Token> = (0..stages * t).map(|_| rng.random_range(0..k as u32)).collect();
        let g = TokenGrid::new(set.layout("rvq", 50.0).unwrap(), t, codes.clone()).unwrap();
        let rec = rvq_decode(&g, &set).unwrap();
        for frame in 0..t {
            for j in 0..dim {
                let mut acc = 0.0;
                for s in 0..stages {
                    let code = codes[s * t + frame] as usize;
                    acc += words[s * k * dim + code * dim + j];
                }
                assert_eq!(rec.frame(frame)[j], acc);
            }
        }
    }

    #[test]
    fn decode_rejects_special_tokens() {
        let set = two_point_book();
        let g = TokenGrid::filled(set.layout("rvq", 50.0).unwrap(), 2, 3);
        assert!(matches!(rvq_decode(&g, &set), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn encode_errors() {
        let set = two_point_book();
        let wrong = FrameSequence::from_frames(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(rvq_encode(&wrong, &set), Err(Error::DimensionMismatch { .. })));
        let empty = FrameSequence::new(2, vec![]).unwrap();
        assert!(rvq_encode(&empty, &set).is_err());
    }

    #[test]
    fn kmeans_recovers_distinct_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 3.0, (i % 3) as f64 * 5.0]).collect();
        let frames: Vec<Vec<f64>> = (0..400).map(|_| centers[rng.random_range(0..8)].clone()).collect();
        let fs = FrameSequence::from_frames(&frames).unwrap();
        let (set, report) = fit_codebooks(&fs, FitOptions::new(1, 8, 5)).unwrap();
        assert!(report.stage_mse[0] < 1e-12, "{:?}", report);
        let rec = rvq_decode(&rvq_encode(&fs, &set).unwrap(), &set).unwrap();
        assert!(rec.mse(&fs).unwrap() < 1e-12);
    }

    #[test]
    fn stage_mse_is_non_increasing_during_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..600 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fs = FrameSequence::new(3, data).unwrap();
        let (_, report) = fit_codebooks(&fs, FitOptions::new(4, 16, 9)).unwrap();
        for w in report.stage_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", report.stage_mse);
        }
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..200 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fs = FrameSequence::new(2, data).unwrap();
        let a = fit_codebooks(&fs, FitOptions::new(2, 8, 1)).unwrap();
        let b = fit_codebooks(&fs, FitOptions::new(2, 8, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_data_falls_back() {
        let fs = FrameSequence::from_frames(&vec![vec![2.0, -1.0]; 20]).unwrap();
        let (set, report) = fit_codebooks(&fs, FitOptions::new(2, 4, 0)).unwrap();
        assert!(report.degenerate);
        let g = rvq_encode(&fs, &set).unwrap();
        assert!(g.row(0).iter().all(|&c| c == 0));
        assert!(rvq_decode(&g, &set).unwrap().mse(&fs).unwrap() < 1e-24);
    }

    #[test]
    fn too_few_frames() {
        let fs = FrameSequence::from_frames(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(fit_codebooks(&fs, FitOptions::new(1, 4, 0)).is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let set = CodebookSet::new(2, 2, 2, vec![0.5, -1.0, 2.0, 3.0, 0.0, 0.0, 1e-9, 7.0]).unwrap();
        let back = decode_codebooks(&encode_codebooks(&set)).unwrap();
        assert_eq!(set, back);
        let bytes = encode_codebooks(&set);
        assert!(decode_codebooks(&bytes[..bytes.len() - 3]).is_err());
    }
}
