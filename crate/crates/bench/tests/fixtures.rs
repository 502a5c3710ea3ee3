use stemgen_bench::*;
use stemgen_core::{validate_grid, LayoutSpec};

#[test]
fn fixtures_are_well_formed() {
    let grid = random_grid(&LayoutSpec::audio_default(), 30, 1);
    assert!(validate_grid(&grid).is_ok());
    assert_eq!(random_grid(&LayoutSpec::audio_default(), 30, 1), grid);
    let songs = songs(3, 0);
    assert_eq!(songs.len(), 3);
    let model = toy_model(0);
    assert_eq!(model.config.layout.n_streams(), 6);
    let (frames, set) = other_frames_and_codebooks(4);
    assert_eq!(frames.dim(), set.dim());
}
