//! Partial delay pattern: stream `i` is shifted right by `delays[i]` frames
//! and every stream is padded with `PAD_DELAY` up to `T + max_delay`.

use crate::error::{Error, Result};
use crate::layout::{LayoutSpec, Special, Token, TokenGrid};

/// A token grid in the delayed domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedGrid(TokenGrid);

impl DelayedGrid {
    /// Wraps a grid that is claimed to be delayed; [`remove_delay`] checks it.
    pub fn from_grid(grid: TokenGrid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.0
    }

    pub fn into_grid(self) -> TokenGrid {
        self.0
    }

    pub fn n_frames(&self) -> usize {
        self.0.n_frames()
    }

    /// Frame count of the grid before delaying.
    pub fn original_frames(&self) -> Option<usize> {
        self.0.n_frames().checked_sub(self.0.layout().max_delay())
    }
}

/// Shifts a row-major `S x T` cell matrix into the delayed domain, filling
/// vacated cells with `pad(stream)`.
pub fn delay_cells<C: Copy>(layout: &LayoutSpec, cells: &[C], n_frames: usize, pad: impl Fn(usize) -> C) -> Vec<C> {
    let out_frames = n_frames + layout.max_delay();
    let mut out = Vec::with_capacity(layout.n_streams() * out_frames);
    for (s, &d) in layout.delays().iter().enumerate() {
        let row = &cells[s * n_frames..(s + 1) * n_frames];
        let p = pad(s);
        out.extend(std::iter::repeat_n(p, d));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(p, out_frames - n_frames - d));
    }
    out
}

pub fn apply_delay(grid: &TokenGrid) -> DelayedGrid {
    let layout = grid.layout();
    let tokens = delay_cells(layout, grid.tokens(), grid.n_frames(), |s| {
        layout.special(s, Special::PadDelay)
    });
    let out_frames = grid.n_frames() + layout.max_delay();
    DelayedGrid(TokenGrid::new(layout.clone(), out_frames, tokens).expect("delayed shape"))
}

pub fn remove_delay(delayed: &DelayedGrid) -> Result<TokenGrid> {
    let grid = &delayed.0;
    let layout = grid.layout();
    let n_frames = delayed.original_frames().ok_or_else(|| {
        Error::MalformedDelay(format!(
            "{} frames is shorter than the max delay {}",
            grid.n_frames(),
            layout.max_delay()
        ))
    })?;
    let mut rows: Vec<Vec<Token>> = Vec::with_capacity(layout.n_streams());
    for (s, &d) in layout.delays().iter().enumerate() {
        let pad = layout.special(s, Special::PadDelay);
        let row = grid.row(s);
        for (t, &tok) in row.iter().enumerate() {
            let in_payload = t >= d && t < d + n_frames;
            if in_payload == (tok == pad) {
                let what = if in_payload {
                    "PAD_DELAY inside payload"
                } else {
                    "missing PAD_DELAY"
                };
                return Err(Error::MalformedDelay(format!("{what} at stream {s}, frame {t}")));
            }
        }
        rows.push(row[d..d + n_frames].to_vec());
    }
    TokenGrid::from_rows(layout.clone(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{make_layout, DelayRule, StemSpec};
    use proptest::prelude::*;

    fn counting_grid(layout: LayoutSpec, t: usize) -> TokenGrid {
        let s = layout.n_streams();
        let m = (0..s).map(|i| layout.codebook_size(i)).min().unwrap();
        let tokens = (0..s * t).map(|i| i as Token % m).collect();
        TokenGrid::new(layout, t, tokens).unwrap()
    }

    #[test]
    fn audio_layout_t4() {
        let g = counting_grid(LayoutSpec::audio_default(), 4);
        let d = apply_delay(&g);
        assert_eq!(d.n_frames(), 7);
        let pad = 64;
        // other4 (stream 5, delay 3) occupies frames 3..6.
        assert_eq!(&d.grid().row(5)[..3], &[pad, pad, pad]);
        assert_eq!(&d.grid().row(5)[3..], g.row(5));
        // bass is padded only at the tail.
        assert_eq!(&d.grid().row(0)[..4], g.row(0));
        assert_eq!(&d.grid().row(0)[4..], &[pad, pad, pad]);
    }

    #[test]
    fn zero_delays_identity() {
        let layout = make_layout(vec![StemSpec::uniform("a", 3, 8)], 50.0, DelayRule::None).unwrap();
        let g = counting_grid(layout, 5);
        let d = apply_delay(&g);
        assert_eq!(d.grid(), &g);
        assert_eq!(remove_delay(&d).unwrap(), g);
    }

    #[test]
    fn one_frame_two_streams() {
        let layout = make_layout(vec![StemSpec::uniform("a", 2, 8)], 50.0, DelayRule::ResidualStages).unwrap();
        let g = TokenGrid::from_rows(layout, &[vec![5], vec![6]]).unwrap();
        let d = apply_delay(&g);
        assert_eq!(d.grid().row(0), &[5, 8]);
        assert_eq!(d.grid().row(1), &[8, 6]);
    }

    #[test]
    fn corrupt_pad_is_rejected() {
        let g = counting_grid(LayoutSpec::audio_default(), 6);
        let d = apply_delay(&g);
        let mut bad = d.clone().into_grid();
        bad.set(2, 1, 64);
        assert!(matches!(
            remove_delay(&DelayedGrid::from_grid(bad)),
            Err(Error::MalformedDelay(_))
        ));
        let mut missing = d.into_grid();
        missing.set(5, 0, 1);
        assert!(remove_delay(&DelayedGrid::from_grid(missing)).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = TokenGrid> {
        (1usize..=6, 1usize..=64)
            .prop_flat_map(|(s, t)| {
                (
                    prop::collection::vec(0usize..=4, s),
                    prop::collection::vec(2u32..40, s),
                    Just(t),
                )
            })
            .prop_flat_map(|(delays, cbs, t)| {
                let n = delays.len() * t;
                let max_cb = *cbs.iter().min().unwrap();
                (Just(delays), Just(cbs), Just(t), prop::collection::vec(0..max_cb, n))
            })
            .prop_map(|(delays, cbs, t, tokens)| {
                let stems = cbs
                    .iter()
                    .enumerate()
                    .map(|(i, &cb)| StemSpec::uniform(format!("s{i}"), 1, cb))
                    .collect();
                let layout = make_layout(stems, 50.0, DelayRule::Explicit(delays)).unwrap();
                TokenGrid::new(layout, t, tokens).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_and_padding(g in arb_grid()) {
            let d = apply_delay(&g);
            prop_assert_eq!(d.n_frames(), g.n_frames() + g.layout().max_delay());
            for s in 0..g.n_streams() {
                let pad = g.layout().special(s, Special::PadDelay);
                let mut kept: Vec<_> = d.grid().row(s).iter().copied().filter(|&x| x != pad).collect();
                let mut orig = g.row(s).to_vec();
                kept.sort_unstable();
                orig.sort_unstable();
                prop_assert_eq!(kept, orig);
            }
            prop_assert_eq!(remove_delay(&d).unwrap(), g);
        }
    }
}
