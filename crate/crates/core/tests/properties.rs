//! Property tests for tensor primitives, metrics, weight files and the
//! learning-rate schedule.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmrn::data::{bicubic_upscale, degrade, DegradationSpec};
use pmrn::metrics::{self, Plane};
use pmrn::tensor::{
    concat_channels, conv2d, pixel_shuffle, pixel_unshuffle, slice_channels, ConvParams, Dihedral,
};
use pmrn::trainer::TrainConfig;
use pmrn::weights::{load_weights, save_weights};
use pmrn::{ParamStore, PmrnConfig, Shape, Tensor};

fn seeded(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_shuffle_is_a_bijection(n in 1usize..3, c in 1usize..4, r in 1usize..5,
                                    h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = seeded(Shape::new(n, c * r * r, h, w), seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c, h * r, w * r));
        let back = pixel_unshuffle(&y, r).unwrap();
        prop_assert_eq!(back.data(), x.data());
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn concat_then_slice_recovers_parts(channels in prop::collection::vec(1usize..5, 1..5),
                                        h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let parts: Vec<Tensor<f64>> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| seeded(Shape::new(2, c, h, w), seed.wrapping_add(i as u64)))
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        prop_assert_eq!(cat.shape().c, channels.iter().sum::<usize>());
        let mut start = 0;
        for p in &parts {
            let s = slice_channels(&cat, start, p.shape().c).unwrap();
            prop_assert_eq!(s.data(), p.data());
            start += p.shape().c;
        }
    }

    #[test]
    fn grouped_conv_equals_block_diagonal_dense(groups in 1usize..4, cin_g in 1usize..3, cout_g in 1usize..3,
                                                k in prop::sample::select(vec![1usize, 3]),
                                                stride in 1usize..3, seed in any::<u64>()) {
        let (cin, cout) = (groups * cin_g, groups * cout_g);
        let p = ConvParams { stride, padding: k / 2, groups };
        let x = seeded(Shape::new(1, cin, 7, 6), seed);
        let wg = seeded(Shape::new(cout, cin_g, k, k), seed ^ 1);
        let b = seeded(Shape::new(cout, 1, 1, 1), seed ^ 2);
        // dense weights that are zero outside each output channel's group
        let wd = Tensor::from_fn(Shape::new(cout, cin, k, k), |co, ci, y, x| {
            let g = co / cout_g;
            if ci / cin_g == g { wg.at(co, ci % cin_g, y, x) } else { 0.0 }
        });
        let grouped = conv2d(&x, &wg, Some(&b), p).unwrap();
        let dense = conv2d(&x, &wd, Some(&b), ConvParams { groups: 1, ..p }).unwrap();
        prop_assert!(grouped.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn dihedral_invert_undoes_apply(i in 0usize..8, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = seeded(Shape::new(1, 2, h, w), seed);
        let d = Dihedral::from_index(i);
        let back = d.invert(&d.apply(&x));
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(w in 14usize..28, h in 14usize..28, seed in any::<u64>(), noise in 0.5f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..255.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.gen_range(-noise..noise)).clamp(0.0, 255.0)).collect();
        let (pa, pb) = (Plane::new(w, h, a).unwrap(), Plane::new(w, h, b).unwrap());
        let (p1, p2) = (metrics::psnr(&pa, &pb, 1).unwrap(), metrics::psnr(&pb, &pa, 1).unwrap());
        prop_assert!((p1 - p2).abs() < 1e-12);
        let (s1, s2) = (metrics::ssim(&pa, &pb, 1).unwrap(), metrics::ssim(&pb, &pa, 1).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_ignores_common_offset_and_falls_with_error(w in 8usize..20, h in 8usize..20, seed in any::<u64>(),
                                                     offset in -50.0f64..50.0, err in 0.5f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen_range(60.0..190.0)).collect();
        let signs: Vec<f64> = (0..w * h).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
        let with_error = |e: f64, shift: f64| {
            let b: Vec<f64> = a.iter().zip(&signs).map(|(v, s)| v + s * e + shift).collect();
            let a: Vec<f64> = a.iter().map(|v| v + shift).collect();
            metrics::psnr(&Plane::new(w, h, a).unwrap(), &Plane::new(w, h, b).unwrap(), 0).unwrap()
        };
        prop_assert!((with_error(err, 0.0) - with_error(err, offset)).abs() < 1e-9);
        prop_assert!(with_error(err * 1.5, 0.0) < with_error(err, 0.0));
    }

    #[test]
    fn bicubic_baseline_is_finite_and_positive(seed in 0u64..1000, r in 2usize..5) {
        let hr = pmrn::synthetic::scene(48, 48, seed);
        let lr = degrade(&hr, &DegradationSpec::bicubic(r)).unwrap();
        let up = bicubic_upscale(&lr, r).unwrap();
        let psnr = metrics::psnr_y(&hr, &up, r).unwrap();
        prop_assert!(psnr.is_finite() && psnr > 0.0);
    }

    #[test]
    fn schedule_halves_at_unit_boundaries(lr0 in 1e-6f64..1e-2, halve_every in 1u64..500, unit in 0u64..5000) {
        let cfg = TrainConfig { lr0, halve_every, ..TrainConfig::default() };
        let expected = lr0 / 2f64.powi((unit / halve_every) as i32);
        prop_assert!((cfg.lr(unit) - expected).abs() <= expected * 1e-15);
        prop_assert!(cfg.lr(unit + 1) <= cfg.lr(unit));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_round_trip_bit_exactly(sizes in prop::collection::vec((1usize..4, 1usize..4, 1usize..4), 1..6),
                                      seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(c, h, w)) in sizes.iter().enumerate() {
            let t = Tensor::from_fn(Shape::new(2, c, h, w), |_, _, _, _| rng.gen::<f32>() - 0.5);
            store.insert(format!("layer{i}.weight"), t).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmrn");
        let cfg = PmrnConfig::desk();
        save_weights(&store, &cfg, &path).unwrap();
        let (found, loaded) = load_weights(&path).unwrap();
        prop_assert_eq!(found, serde_json::to_value(cfg).unwrap());
        prop_assert_eq!(loaded, store);
    }
}
