//! Adaptive spatial pyramid pooling.
//!
//! A `C x H x W` feature map is split into an `n x n` grid whose cell extents scale with
//! `H` and `W`, so the layout of the image is kept while the output length stays `C * n^2`
//! for every input size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::{Error, Result};

/// Guard for the l2 normalization of pooled vectors.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SppConfig {
    pub n: usize,
    pub channels: usize,
}

impl SppConfig {
    pub fn new(n: usize, channels: usize) -> Result<Self> {
        if n == 0 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "spp grid side and channels must be >= 1 (n = {n}, channels = {channels})"
            )));
        }
        Ok(Self { n, channels })
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.n * self.n
    }
}

/// Half-open index range `[floor(i*extent/n), floor((i+1)*extent/n))` of grid cell `i`.
pub fn cell_bounds(extent: usize, n: usize, i: usize) -> (usize, usize) {
    (i * extent / n, (i + 1) * extent / n)
}

fn fmap_dims<T: Real>(tape: &Tape<T>, fmap: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(fmap) {
        [c, h, w] => Ok((c, h, w)),
        ref other => Err(Error::shape("spp", format!("expected [C,H,W], got {other:?}"))),
    }
}

/// Grid max pooling, stacked cell-major / channel-minor, then l2-normalized.
pub fn adaptive_spp<T: Real>(tape: &mut Tape<T>, fmap: Var, cfg: &SppConfig) -> Result<Var> {
    let (c, h, w) = fmap_dims(tape, fmap)?;
    if c != cfg.channels {
        return Err(Error::shape(
            "spp",
            format!("feature map has {c} channels, config expects {}", cfg.channels),
        ));
    }
    let n = cfg.n;
    if h < n || w < n {
        return Err(Error::ResolutionTooSmall {
            height: h,
            width: w,
            min_height: n,
            min_width: n,
        });
    }
    let mut cells = Vec::with_capacity(n * n);
    for i in 0..n {
        let (r0, r1) = cell_bounds(h, n, i);
        for j in 0..n {
            let (c0, c1) = cell_bounds(w, n, j);
            cells.push(tape.max_pool_region(fmap, r0, r1, c0, c1)?);
        }
    }
    let stacked = tape.concat(&cells)?;
    Ok(tape.l2_normalize(stacked, T::of(L2_EPS)))
}

/// Per-channel global max, l2-normalized.
pub fn global_max_branch<T: Real>(tape: &mut Tape<T>, fmap: Var) -> Result<Var> {
    let (_, h, w) = fmap_dims(tape, fmap)?;
    let pooled = tape.max_pool_region(fmap, 0, h, 0, w)?;
    Ok(tape.l2_normalize(pooled, T::of(L2_EPS)))
}
