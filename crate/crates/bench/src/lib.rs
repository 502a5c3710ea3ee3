//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemgen_core::dataset::synthesize_songs;
use stemgen_core::model::{Model, ModelConfig};
use stemgen_core::rvq::{fit_codebooks, CodebookSet, FitOptions, FrameSequence};
use stemgen_core::synth::{render_frames, symbolic_layout, symbolic_tokenize, StyleParams, N_CONDITIONS};
use stemgen_core::train::TrainConfig;
use stemgen_core::{LayoutSpec, TokenGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random codebook tokens over `layout`.
pub fn random_grid(layout: &LayoutSpec, n_frames: usize, seed: u64) -> TokenGrid {
    let mut r = rng(seed);
    let mut grid = TokenGrid::filled(layout.clone(), n_frames, 0);
    for s in 0..layout.n_streams() {
        let cb = layout.codebook_size(s);
        for v in grid.row_mut(s) {
            *v = r.random_range(0..cb);
        }
    }
    grid
}

/// Tokenized synthetic songs.
pub fn songs(n: usize, seed: u64) -> Vec<TokenGrid> {
    let layout = symbolic_layout(8.0);
    synthesize_songs(n, &StyleParams::default(), seed)
        .unwrap()
        .iter()
        .map(|s| symbolic_tokenize(s, &layout).unwrap())
        .collect()
}

/// The toy model configuration on the symbolic layout.
pub fn toy_model(seed: u64) -> Model<f32> {
    let cfg: ModelConfig = TrainConfig::toy().model_config(&symbolic_layout(8.0), N_CONDITIONS);
    Model::new(cfg, &mut rng(seed)).unwrap()
}

/// Rendered `other` frames of `n` songs with a 4-stage codebook fitted on them.
pub fn other_frames_and_codebooks(n: usize) -> (FrameSequence, CodebookSet) {
    let songs = synthesize_songs(n, &StyleParams::default(), 3).unwrap();
    let mut dim = 0;
    let mut data = Vec::new();
    for song in &songs {
        let (_, f) = render_frames(song)
            .into_iter()
            .find(|(name, _)| name == "other")
            .unwrap();
        dim = f.dim();
        data.extend_from_slice(f.as_slice());
    }
    let frames = FrameSequence::new(dim, data).unwrap();
    let (set, _) = fit_codebooks(&frames, FitOptions::new(4, 16, 0)).unwrap();
    (frames, set)
}
