//! Cross-module properties checked on random inputs.

#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemgen_core::edit::{build_conditioning, downsample_grid, sample_edit_plan, EditPlan};
use stemgen_core::format::{decode_grid, encode_grid};
use stemgen_core::metrics::preservation_rate;
use stemgen_core::model::{Condition, Model, ModelConfig};
use stemgen_core::rvq::{fit_codebooks, rvq_decode_stages, rvq_encode, FitOptions, FrameSequence};
use stemgen_core::sampler::{edit, DecodeParams, EditMode};
use stemgen_core::synth::symbolic_layout;
use stemgen_core::{make_layout, DelayRule, LayoutSpec, Special, StemSpec, TokenGrid};

fn random_layout(rng: &mut ChaCha8Rng) -> LayoutSpec {
    let n_stems = rng.random_range(1..=3);
    let stems = (0..n_stems)
        .map(|i| {
            let k = rng.random_range(1..=3);
            StemSpec::new(format!("s{i}"), (0..k).map(|_| rng.random_range(2..=40)).collect())
        })
        .collect();
    make_layout(stems, 25.0, DelayRule::ResidualStages).unwrap()
}

fn random_grid(layout: &LayoutSpec, n: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    let mut g = TokenGrid::filled(layout.clone(), n, 0);
    for s in 0..layout.n_streams() {
        let cb = layout.codebook_size(s);
        g.row_mut(s).iter_mut().for_each(|v| *v = rng.random_range(0..cb));
    }
    g
}

fn frame_errors(a: &FrameSequence, b: &FrameSequence) -> Vec<f64> {
    (0..a.len())
        .map(|t| a.frame(t).iter().zip(b.frame(t)).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_files_round_trip(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng);
        let g = random_grid(&layout, n, &mut rng);
        prop_assert_eq!(decode_grid(&encode_grid(&g)).unwrap(), g);
    }

    #[test]
    fn conditioning_invariants(seed in any::<u64>(), n in 5usize..60, factor in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng);
        let body = random_grid(&layout, n, &mut rng);
        let plan = sample_edit_plan(&layout, factor, &mut rng);
        let cond = build_conditioning(&body, &plan).unwrap();
        let down = downsample_grid(&body, factor).unwrap();
        let masked = plan.masked_streams(&layout).unwrap();
        prop_assert_eq!(cond.prefix.n_frames(), n / factor);
        for s in 0..layout.n_streams() {
            if masked[s] {
                prop_assert!(cond.prefix.row(s).iter().all(|&t| t == layout.special(s, Special::Mask)));
            } else {
                prop_assert_eq!(cond.prefix.row(s), down.row(s));
            }
        }
        let total = cond.concat_frames();
        let np = cond.prefix.n_frames();
        for s in 0..layout.n_streams() {
            let row = &cond.loss_mask[s * total..(s + 1) * total];
            prop_assert!(row[..=np].iter().all(|&m| !m));
            prop_assert!(row[np + 1..].iter().all(|&m| m));
        }
        prop_assert_eq!(cond.loss_mask.iter().filter(|&&m| m).count(), layout.n_streams() * n);
        prop_assert_eq!(build_conditioning(&body, &plan).unwrap(), cond);
    }

    #[test]
    fn more_stages_never_hurt(seed in any::<u64>(), dim in 1usize..5, stages in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = FrameSequence::new(dim, (0..120 * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = FrameSequence::new(dim, (0..60 * dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (set, _) = fit_codebooks(&train, FitOptions::new(stages, 8, seed)).unwrap();
        let codes = rvq_encode(&eval, &set).unwrap();
        let per_stage: Vec<Vec<f64>> = (1..=stages)
            .map(|s| frame_errors(&rvq_decode_stages(&codes, &set, s).unwrap(), &eval))
            .collect();
        for w in per_stage.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                prop_assert!(b <= a, "frame error rose from {} to {}", a, b);
            }
        }
        prop_assert_eq!(rvq_encode(&eval, &set).unwrap(), codes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forced_edits_keep_unmasked_streams(seed in any::<u64>(), n in 5usize..24) {
        let layout = symbolic_layout(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(layout.clone(), 6);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.ff_mult = 2;
        cfg.max_frames = 40;
        cfg.zero_init_heads = false;
        let model = Model::<f32>::new(cfg, &mut rng).unwrap();
        let src = random_grid(&layout, n, &mut rng);
        let plan: EditPlan = sample_edit_plan(&layout, 5, &mut rng);
        let cond = Condition::from_option((seed % 2 == 0).then_some(seed as usize % 6));
        let out = edit(&model, &src, &plan, cond, EditMode::Forced, &DecodeParams::default(), seed).unwrap();
        for r in preservation_rate(&src, &out, &plan).unwrap().into_iter().flatten() {
            prop_assert_eq!(r, 1.0);
        }
        for s in 0..layout.n_streams() {
            prop_assert!(out.row(s).iter().all(|&t| layout.is_codebook_token(s, t)));
        }
    }
}
