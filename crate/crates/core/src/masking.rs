//! Visible/masked partitions of a patch grid.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PatchGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Block,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        })
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "block" => Ok(MaskStrategy::Block),
            other => Err(Error::input(format!("unknown mask strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Random,
            ratio: 0.75,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        grid_h: usize,
        grid_w: usize,
        rng: &mut R,
    ) -> Result<MaskResult> {
        match self.strategy {
            MaskStrategy::Random => sample_random_mask(grid_h * grid_w, self.ratio, rng),
            MaskStrategy::Block => sample_block_mask(grid_h, grid_w, self.ratio, rng),
        }
    }
}

/// Partition of `0..n_patches` into sorted visible and masked index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskResult {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub n_patches: usize,
}

impl MaskResult {
    /// Everything visible.
    pub fn none(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
            n_patches,
        }
    }

    fn from_masked(n_patches: usize, masked: impl IntoIterator<Item = usize>) -> Self {
        let mut is_masked = vec![false; n_patches];
        for i in masked {
            is_masked[i] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) =
            (0..n_patches).partition(|&i| is_masked[i]);
        Self {
            visible,
            masked,
            n_patches,
        }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::input(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// `floor(ratio * n)`.
pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).floor() as usize
}

/// Masks `floor(ratio * n)` patches chosen uniformly without replacement.
pub fn sample_random_mask<R: Rng + ?Sized>(
    n_patches: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskResult> {
    check_ratio(ratio)?;
    if n_patches == 0 {
        return Err(Error::input("cannot mask an empty grid"));
    }
    let k = masked_count(n_patches, ratio);
    let chosen = index::sample(rng, n_patches, k);
    Ok(MaskResult::from_masked(n_patches, chosen.into_iter()))
}

/// Axis-aligned rectangle of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }
}

/// Smallest rectangle area the block sampler draws.
pub const BLOCK_MIN_AREA: usize = 4;
const BLOCK_MAX_ATTEMPTS: usize = 1000;

fn block_shapes(grid_h: usize, grid_w: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for h in 1..=grid_h {
        for w in 1..=grid_w {
            let aspect_ok = 2 * h >= w && 2 * w >= h;
            if aspect_ok && h * w >= BLOCK_MIN_AREA {
                shapes.push((h, w));
            }
        }
    }
    if shapes.is_empty() {
        // Grids too small for the minimum area: fall back to any rectangle.
        for h in 1..=grid_h {
            for w in 1..=grid_w {
                shapes.push((h, w));
            }
        }
    }
    shapes
}

/// Block-wise masking with the rectangles that produced it.
///
/// Rectangles (area >= 4, aspect ratio in [0.5, 2]) are drawn until at
/// least `floor(ratio * n)` cells are covered; cells are recorded in the
/// order they were first covered, and the excess is trimmed from the end of
/// that order.
pub fn sample_block_mask_traced<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<(MaskResult, Vec<Rect>)> {
    check_ratio(ratio)?;
    let n = grid_h * grid_w;
    if n == 0 {
        return Err(Error::input("cannot mask an empty grid"));
    }
    let target = masked_count(n, ratio);
    let shapes = block_shapes(grid_h, grid_w);
    let mut covered = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut rects = Vec::new();
    let mut attempts = 0;
    while order.len() < target {
        if attempts == BLOCK_MAX_ATTEMPTS {
            let mut rest: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
            rest.shuffle(rng);
            order.extend(rest);
            break;
        }
        attempts += 1;
        let remaining = target - order.len();
        let fitting: Vec<(usize, usize)> = shapes
            .iter()
            .copied()
            .filter(|(h, w)| h * w <= remaining.max(BLOCK_MIN_AREA))
            .collect();
        let pool = if fitting.is_empty() {
            let min_area = shapes.iter().map(|(h, w)| h * w).min().unwrap_or(1);
            shapes
                .iter()
                .copied()
                .filter(|(h, w)| h * w == min_area)
                .collect()
        } else {
            fitting
        };
        let (h, w) = pool[rng.random_range(0..pool.len())];
        let rect = Rect {
            top: rng.random_range(0..=grid_h - h),
            left: rng.random_range(0..=grid_w - w),
            height: h,
            width: w,
        };
        for r in rect.top..rect.top + h {
            for c in rect.left..rect.left + w {
                let idx = r * grid_w + c;
                if !covered[idx] {
                    covered[idx] = true;
                    order.push(idx);
                }
            }
        }
        rects.push(rect);
    }
    order.truncate(target);
    Ok((MaskResult::from_masked(n, order), rects))
}

pub fn sample_block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskResult> {
    sample_block_mask_traced(grid_h, grid_w, ratio, rng).map(|(m, _)| m)
}

/// Visible patches in index order, each paired with its grid index.
pub fn apply_mask<'a>(grid: &'a PatchGrid, mask: &MaskResult) -> Result<Vec<(usize, &'a [f64])>> {
    if mask.n_patches != grid.len() {
        return Err(Error::dim(format!(
            "mask over {} patches applied to a grid of {}",
            mask.n_patches,
            grid.len()
        )));
    }
    Ok(mask
        .visible
        .iter()
        .map(|&i| (i, grid.patches[i].as_slice()))
        .collect())
}

/// Number of masked cells with at least one masked 4-neighbour.
pub fn masked_adjacency(mask: &MaskResult, grid_h: usize, grid_w: usize) -> usize {
    let mut m = vec![false; grid_h * grid_w];
    for &i in &mask.masked {
        m[i] = true;
    }
    mask.masked
        .iter()
        .filter(|&&i| {
            let (r, c) = (i / grid_w, i % grid_w);
            (r > 0 && m[i - grid_w])
                || (r + 1 < grid_h && m[i + grid_w])
                || (c > 0 && m[i - 1])
                || (c + 1 < grid_w && m[i + 1])
        })
        .count()
}
