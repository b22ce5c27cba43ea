use m3_core::tensor_file::{read_grid_from, write_grid_to};
use m3_core::token_pyramid::{
    build_pyramid, flatten, inference_pool, sequential_sample, spatial_sample, TokenGrid,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> TokenGrid<f32> {
    TokenGrid::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Block mean of the finest grid, summed directly in f64.
fn block_mean(grid: &TokenGrid<f32>, side: usize, r: usize, c: usize, ch: usize) -> f64 {
    let mut acc = 0.0f64;
    for y in r * side..(r + 1) * side {
        for x in c * side..(c + 1) * side {
            acc += grid.token(y, x)[ch] as f64;
        }
    }
    acc / (side * side) as f64
}

#[test]
fn every_coarse_token_is_a_block_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, c) in [(24, 3), (12, 2), (6, 4), (3, 1), (48, 1)] {
        let g = random_grid(&mut rng, h, h, c);
        let p = build_pyramid(&g).unwrap();
        for scale in p.scales() {
            let side = h / scale.height();
            for r in 0..scale.height() {
                for col in 0..scale.width() {
                    for ch in 0..c {
                        let want = block_mean(&g, side, r, col, ch);
                        let got = scale.token(r, col)[ch] as f64;
                        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{h}: {got} vs {want}");
                    }
                }
            }
        }
    }
}

#[test]
fn canonical_schedules() {
    let g = TokenGrid::<f32>::filled(24, 24, 2, 0.5).unwrap();
    assert_eq!(build_pyramid(&g).unwrap().schedule().sizes(), &[1, 9, 36, 144, 576]);
    let g = TokenGrid::<f32>::filled(12, 12, 2, 0.5).unwrap();
    assert_eq!(build_pyramid(&g).unwrap().schedule().sizes(), &[1, 9, 36, 144]);
    let g = TokenGrid::<f32>::filled(1, 1, 2, 0.5).unwrap();
    assert_eq!(build_pyramid(&g).unwrap().schedule().sizes(), &[1]);
}

#[test]
fn non_square_and_odd_grids() {
    // 8x8 pools to 4x4 then 2x2 and stops: no 1-token scale
    let g = TokenGrid::<f32>::filled(8, 8, 1, 1.0).unwrap();
    assert_eq!(build_pyramid(&g).unwrap().schedule().sizes(), &[4, 16, 64]);
    let g = TokenGrid::<f32>::filled(10, 10, 1, 1.0).unwrap();
    assert!(build_pyramid(&g).is_err());
    let g = TokenGrid::<f32>::filled(5, 5, 1, 1.0).unwrap();
    assert!(build_pyramid(&g).is_err());
    // 12x6 -> 6x3 stops (height even > 3 but width 3 prevents 2x2)
    let g = TokenGrid::<f32>::filled(12, 6, 1, 1.0).unwrap();
    assert_eq!(build_pyramid(&g).unwrap().schedule().sizes(), &[18, 72]);
}

#[test]
fn constant_grid_is_constant_at_every_scale() {
    let g = TokenGrid::<f32>::filled(24, 24, 3, 0.3).unwrap();
    for s in build_pyramid(&g).unwrap().scales() {
        assert!(s.values().iter().all(|&v| v == 0.3));
    }
}

#[test]
fn baselines_select_expected_tokens() {
    let vals: Vec<f32> = (0..144).map(|i| i as f32).collect();
    let g = TokenGrid::new(12, 12, 1, vals).unwrap();
    // lattice rows/cols at floor((2i+1)*12/6) = 2, 6, 10
    let s = spatial_sample(&g, 9).unwrap();
    let want: Vec<f32> = [2, 6, 10].iter().flat_map(|r| [2, 6, 10].map(|c| (r * 12 + c) as f32)).collect();
    assert_eq!(s.values(), &want[..]);
    let q = sequential_sample(&g, 9).unwrap();
    assert_eq!(q.as_slice().unwrap(), &(0..9).map(|i| i as f32).collect::<Vec<_>>()[..]);
    assert_eq!(inference_pool(&g, 144).unwrap(), g);
    assert!(inference_pool(&g, 16).is_err());
    assert!(spatial_sample(&g, 10).is_err());
    assert!(sequential_sample(&g, 145).is_err());
    assert_eq!(flatten(&g).nrows(), 144);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_schedule_and_conservation(a in 0u32..4, three in any::<bool>(), c in 1usize..4, seed in any::<u64>()) {
        let side = 2usize.pow(a) * if three { 3 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&mut rng, side, side, c);
        let p = build_pyramid(&g).unwrap();
        let sizes = p.schedule().sizes();
        prop_assert!(sizes.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*sizes.last().unwrap(), side * side);
        prop_assert_eq!(sizes[0] == 1, three || side == 1);
        let scale = g.values().iter().map(|v| v.abs() as f64).sum::<f64>() / g.len() as f64;
        let mean = g.global_mean();
        for s in p.scales() {
            prop_assert!((s.global_mean() - mean).abs() <= 1e-6 * scale.max(1e-12));
            prop_assert_eq!(s.channels(), c);
        }
    }

    #[test]
    fn prop_grid_file_roundtrip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&mut rng, h, w, c);
        let mut buf = Vec::new();
        write_grid_to(&mut buf, &g).unwrap();
        prop_assert_eq!(read_grid_from(&buf[..]).unwrap(), g);
    }
}
