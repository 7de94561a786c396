use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msgfm::masking::{draw_mask, masked_count, MaskPlan};
use msgfm::Error;

proptest! {
    #[test]
    fn masked_count_is_rounded_and_clamped(gw in 1usize..12, gh in 1usize..12, ratio in 0.01f64..0.99, seed: u64) {
        prop_assume!(gw * gh >= 2);
        let unit = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = draw_mask(gw * unit, gh * unit, unit, ratio, &mut rng).unwrap();
        let total = gw * gh;
        let want = ((ratio * total as f64).round() as usize).clamp(1, total - 1);
        prop_assert_eq!(m.masked_units(), want);
        prop_assert_eq!(masked_count(total, ratio), want);
        prop_assert_eq!(m.grid_dims(), (gw, gh));
    }

    #[test]
    fn token_mask_agrees_with_pixel_mask(gw in 1usize..6, gh in 1usize..6, seed: u64) {
        prop_assume!(gw * gh >= 2);
        let (unit, patch) = (8, 4);
        let (w, h) = (gw * unit, gh * unit);
        let m = draw_mask(w, h, unit, 0.6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let px = m.to_pixel_mask();
        let tok = m.to_token_mask(patch).unwrap();
        prop_assert_eq!(tok.len(), (w / patch) * (h / patch));
        for x in 0..w {
            for y in 0..h {
                let t = (x / patch) * (h / patch) + y / patch;
                prop_assert_eq!(px[x * h + y], tok[t]);
            }
        }
    }
}

#[test]
fn same_seed_same_plan() {
    let a = draw_mask(32, 32, 8, 0.6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = draw_mask(32, 32, 8, 0.6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_geometry_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(draw_mask(30, 32, 8, 0.6, &mut rng), Err(Error::Divisibility { .. })));
    assert!(draw_mask(8, 8, 8, 0.6, &mut rng).is_err(), "a single unit cannot be split");
    let m = draw_mask(32, 32, 8, 0.6, &mut rng).unwrap();
    assert!(m.to_token_mask(3).is_err());
    assert!(m.to_token_mask(16).is_err(), "patch larger than the mask unit");
}

#[test]
fn empty_plan_masks_nothing() {
    let m = MaskPlan::empty(16, 16, 8).unwrap();
    assert_eq!(m.masked_units(), 0);
    assert!(m.to_pixel_mask().iter().all(|&b| !b));
}

#[test]
fn ratio_must_be_open_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for r in [0.0, 1.0, -0.5, f64::NAN] {
        assert!(matches!(draw_mask(16, 16, 8, r, &mut rng), Err(Error::InvalidArgument(_))));
    }
}
