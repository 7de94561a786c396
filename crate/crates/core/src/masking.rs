//! Mask plans drawn at mask-unit granularity.
//!
//! One plan is drawn per (sample, sensor) and shared by all channels of that
//! sensor. Colocated samples of paired sensors draw their own plans.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mask_unit: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major over `(width / mask_unit) × (height / mask_unit)`.
    pub grid: Vec<bool>,
}

/// Number of masked units: `round(ratio · total)` clamped to `[1, total − 1]`.
pub fn masked_count(total_units: usize, ratio: f64) -> usize {
    let raw = (ratio * total_units as f64).round() as usize;
    raw.clamp(1, total_units.saturating_sub(1).max(1))
}

fn check_divisible(width: usize, height: usize, unit: usize) -> Result<()> {
    if unit == 0 || width % unit != 0 || height % unit != 0 || width == 0 || height == 0 {
        return Err(Error::Divisibility { width, height, unit });
    }
    Ok(())
}

/// Draw a uniformly random set of exactly `masked_count` units.
pub fn draw_mask(width: usize, height: usize, mask_unit: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    check_divisible(width, height, mask_unit)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {} outside (0, 1)", ratio)));
    }
    let total = (width / mask_unit) * (height / mask_unit);
    if total < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image holds {} mask unit(s) of {} px; need at least 2",
            width, height, total, mask_unit
        )));
    }
    let count = masked_count(total, ratio);
    let mut grid = vec![false; total];
    for i in rand::seq::index::sample(rng, total, count).iter() {
        grid[i] = true;
    }
    Ok(MaskPlan {
        mask_unit,
        width,
        height,
        grid,
    })
}

impl MaskPlan {
    /// A plan with no masked unit.
    pub fn empty(width: usize, height: usize, mask_unit: usize) -> Result<Self> {
        check_divisible(width, height, mask_unit)?;
        Ok(MaskPlan {
            mask_unit,
            width,
            height,
            grid: vec![false; (width / mask_unit) * (height / mask_unit)],
        })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.width / self.mask_unit, self.height / self.mask_unit)
    }

    pub fn total_units(&self) -> usize {
        self.grid.len()
    }

    pub fn masked_units(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    fn unit_at(&self, x: usize, y: usize) -> bool {
        let gh = self.height / self.mask_unit;
        self.grid[(x / self.mask_unit) * gh + y / self.mask_unit]
    }

    /// One flag per token of a `patch`-sized grid, row-major.
    pub fn to_token_mask(&self, patch: usize) -> Result<Vec<bool>> {
        if patch == 0 || self.mask_unit % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "mask unit {} is not a multiple of patch size {}",
                self.mask_unit, patch
            )));
        }
        let (tw, th) = (self.width / patch, self.height / patch);
        let mut out = Vec::with_capacity(tw * th);
        for i in 0..tw {
            for j in 0..th {
                out.push(self.unit_at(i * patch, j * patch));
            }
        }
        Ok(out)
    }

    /// One flag per pixel, row-major over `width × height`.
    pub fn to_pixel_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for x in 0..self.width {
            for y in 0..self.height {
                out.push(self.unit_at(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_resolution_masks_22_of_36() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = draw_mask(192, 192, 32, 0.6, &mut rng).unwrap();
        assert_eq!(plan.total_units(), 36);
        assert_eq!(plan.masked_units(), 22);
    }

    #[test]
    fn tiny_ratio_clamps_to_one_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = draw_mask(64, 64, 16, 1e-6, &mut rng).unwrap();
        assert_eq!(plan.masked_units(), 1);
        let plan = draw_mask(64, 64, 16, 0.999, &mut rng).unwrap();
        assert_eq!(plan.masked_units(), 15);
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(draw_mask(30, 32, 8, 0.5, &mut rng), Err(Error::Divisibility { .. })));
        assert!(draw_mask(32, 32, 8, 0.0, &mut rng).is_err());
        assert!(draw_mask(32, 32, 8, 1.0, &mut rng).is_err());
        assert!(draw_mask(32, 32, 32, 0.5, &mut rng).is_err());
    }

    #[test]
    fn token_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = draw_mask(64, 64, 32, 0.5, &mut rng).unwrap();
        let tokens = plan.to_token_mask(4).unwrap();
        assert_eq!(tokens.len(), 256);
        assert_eq!(tokens.iter().filter(|&&m| m).count(), plan.masked_units() * 64);
        assert!(plan.to_token_mask(5).is_err());

        let empty = MaskPlan::empty(64, 64, 32).unwrap();
        assert!(empty.to_token_mask(4).unwrap().iter().all(|&m| !m));
        assert!(empty.to_pixel_mask().iter().all(|&m| !m));
    }

    #[test]
    fn all_but_one_pixel_mask() {
        let mut plan = MaskPlan::empty(16, 8, 4).unwrap();
        plan.grid.iter_mut().for_each(|m| *m = true);
        plan.grid[3] = false;
        let px = plan.to_pixel_mask();
        assert_eq!(px.iter().filter(|&&m| !m).count(), 16);
        // unit 3 sits at grid (1, 1): pixels x in 4..8, y in 4..8
        assert!(!px[5 * 8 + 6]);
        assert!(px[0]);
    }
}
