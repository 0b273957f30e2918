//! Mask sampling over the patch grid.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Uniform sampling without replacement.
    TokenWise,
    /// Rectangular blocks on the patch grid, BEiT style.
    BlockWise,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_wise" => Ok(MaskStrategy::TokenWise),
            "block_wise" => Ok(MaskStrategy::BlockWise),
            other => Err(Error::Config(format!(
                "unknown mask strategy {other:?} (expected token_wise or block_wise)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::TokenWise => "token_wise",
            MaskStrategy::BlockWise => "block_wise",
        })
    }
}

/// Masked and visible patch indices. Indices refer to patches only; a class
/// token, when present, is never part of either set.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub strategy: MaskStrategy,
    /// Sorted.
    pub masked: Vec<usize>,
    /// Sorted complement of `masked`.
    pub visible: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from an explicit masked set.
    pub fn from_masked(num_patches: usize, masked: &[usize], strategy: MaskStrategy) -> Result<Self> {
        let mut flags = vec![false; num_patches];
        for &i in masked {
            if i >= num_patches {
                return Err(Error::InvalidArgument(format!(
                    "masked index {i} out of range for {num_patches} patches"
                )));
            }
            flags[i] = true;
        }
        Ok(Self::from_flags(&flags, strategy))
    }

    fn from_flags(flags: &[bool], strategy: MaskStrategy) -> Self {
        let masked: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        let visible: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
        let ratio = if flags.is_empty() {
            0.0
        } else {
            masked.len() as f64 / flags.len() as f64
        };
        MaskSpec {
            ratio,
            strategy,
            masked,
            visible,
        }
    }

    /// Everything visible.
    pub fn none(num_patches: usize) -> Self {
        Self::from_flags(&vec![false; num_patches], MaskStrategy::TokenWise)
    }

    pub fn num_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Number of patches masked at `ratio`, rounded half away from zero.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    ((ratio * num_patches as f64).round() as usize).min(num_patches)
}

/// Side lengths of the patch grid: square when `num_patches` is a perfect
/// square, otherwise a single row.
pub fn infer_grid(num_patches: usize) -> (usize, usize) {
    let side = (num_patches as f64).sqrt().round() as usize;
    if side * side == num_patches {
        (side, side)
    } else {
        (1, num_patches)
    }
}

/// Samples a mask over `num_patches` patches laid out by [`infer_grid`].
pub fn sample_mask(
    num_patches: usize,
    ratio: f64,
    strategy: MaskStrategy,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    sample_mask_on_grid(infer_grid(num_patches), ratio, strategy, rng)
}

pub fn sample_mask_on_grid(
    grid: (usize, usize),
    ratio: f64,
    strategy: MaskStrategy,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let n = grid.0 * grid.1;
    let target = masked_count(n, ratio);
    let mut flags = vec![false; n];
    match strategy {
        MaskStrategy::TokenWise => {
            for i in sample(rng, n, target) {
                flags[i] = true;
            }
        }
        MaskStrategy::BlockWise => block_mask(grid, target, &mut flags, rng),
    }
    let mut spec = MaskSpec::from_flags(&flags, strategy);
    spec.ratio = ratio;
    Ok(spec)
}

const MIN_BLOCK_AREA: usize = 16;
const MIN_ASPECT: f64 = 0.3;
const BLOCK_ATTEMPTS: usize = 10;

/// Places random rectangles until `target` patches are masked. Each new
/// rectangle must add between 1 and the remaining count of patches. If
/// placement stalls (small grids, tiny remainders) the rest is filled with
/// uniformly chosen patches so the count is always exact.
fn block_mask(grid: (usize, usize), target: usize, flags: &mut [bool], rng: &mut impl Rng) {
    let (height, width) = grid;
    let log_aspect = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());
    let mut count = 0;
    while count < target {
        let remaining = target - count;
        let min_area = MIN_BLOCK_AREA.min(remaining) as f64;
        let mut added = 0;
        for _ in 0..BLOCK_ATTEMPTS {
            let area = if remaining as f64 > min_area {
                rng.random_range(min_area..=remaining as f64)
            } else {
                min_area
            };
            let aspect = rng.random_range(log_aspect.0..log_aspect.1).exp();
            let h = (area * aspect).sqrt().round() as usize;
            let w = (area / aspect).sqrt().round() as usize;
            if h == 0 || w == 0 || h >= height || w >= width {
                continue;
            }
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            let fresh = (top..top + h)
                .flat_map(|i| (left..left + w).map(move |j| i * width + j))
                .filter(|&idx| !flags[idx])
                .count();
            if fresh > 0 && fresh <= remaining {
                for i in top..top + h {
                    for j in left..left + w {
                        flags[i * width + j] = true;
                    }
                }
                added = fresh;
                break;
            }
        }
        if added == 0 {
            break;
        }
        count += added;
    }
    if count < target {
        let free: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
        for k in sample(rng, free.len(), target - count) {
            flags[free[k]] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_ratio_on_196_patches_masks_147() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for strategy in [MaskStrategy::TokenWise, MaskStrategy::BlockWise] {
            let m = sample_mask(196, 0.75, strategy, &mut rng).unwrap();
            assert_eq!(m.masked.len(), 147);
            assert_eq!(m.visible.len(), 49);
        }
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(64, 0.0, MaskStrategy::TokenWise, &mut rng).unwrap();
        assert!(m.masked.is_empty());
        assert_eq!(m.visible, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn sets_partition_the_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 10, 49, 64] {
            for strategy in [MaskStrategy::TokenWise, MaskStrategy::BlockWise] {
                for ratio in [0.0, 0.3, 0.5, 0.75, 1.0] {
                    let m = sample_mask(n, ratio, strategy, &mut rng).unwrap();
                    assert_eq!(m.masked.len(), masked_count(n, ratio));
                    let mut all: Vec<_> = m.masked.iter().chain(&m.visible).copied().collect();
                    all.sort_unstable();
                    assert_eq!(all, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn block_masks_are_spatially_clustered() {
        // A block-masked patch has more masked 4-neighbours on average than a
        // token-wise one at the same ratio.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neighbours = |m: &MaskSpec| -> f64 {
            let mut flags = [false; 196];
            m.masked.iter().for_each(|&i| flags[i] = true);
            let mut total = 0;
            for &i in &m.masked {
                let (r, c) = (i / 14, i % 14);
                if r > 0 && flags[i - 14] {
                    total += 1;
                }
                if r < 13 && flags[i + 14] {
                    total += 1;
                }
                if c > 0 && flags[i - 1] {
                    total += 1;
                }
                if c < 13 && flags[i + 1] {
                    total += 1;
                }
            }
            total as f64 / m.masked.len() as f64
        };
        let (mut block, mut token) = (0.0, 0.0);
        for _ in 0..50 {
            block += neighbours(&sample_mask(196, 0.4, MaskStrategy::BlockWise, &mut rng).unwrap());
            token += neighbours(&sample_mask(196, 0.4, MaskStrategy::TokenWise, &mut rng).unwrap());
        }
        assert!(block > token * 1.3, "block {block} token {token}");
    }

    #[test]
    fn rejects_out_of_range_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_mask(16, 1.5, MaskStrategy::TokenWise, &mut rng).is_err());
        assert!(sample_mask(16, -0.1, MaskStrategy::TokenWise, &mut rng).is_err());
    }
}
