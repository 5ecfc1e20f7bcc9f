use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pva_core::dataset::masks::{build_semantic_mask, dilate_box, is_binary, sample_random_mask, StrokeParams};
use pva_core::dataset::PixelBox;
use pva_core::diffusion::{guidance_combine, make_linear_schedule, MaskedImage};
use pva_core::eval::{cosine, frechet_distance, identity_similarity, kid_mmd, mean_sd};
use pva_core::model::{DenoiserConfig, PvaBlock};
use pva_core::identity::recognizer::init_facenet;
use pva_core::identity::{encode_identity, init_encoder, Recognizer, RecognizerConfig, RecognizerRole};
use pva_core::train::{stratified_times, Phase, TrainConfig};
use pva_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn recognizer(seed: u64) -> Recognizer {
    let config = RecognizerConfig { input_dim: 4 * 4 * 3, hidden: vec![16], feature_dim: 8, ..RecognizerConfig::default() };
    let params = init_facenet(&config, &mut rng(seed));
    Recognizer { role: RecognizerRole::EvalB, seed, config, params, holdout_accuracy: 0.0 }
}

fn points(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_fixes_equal_branches(seed in any::<u64>(), scale in 0.0f64..10.0) {
        let e = points(4, 3, seed);
        let out = guidance_combine(&e, &e, scale).unwrap();
        prop_assert!(out.max_abs_diff(&e) <= 1e-12 * (1.0 + scale));
    }

    #[test]
    fn guidance_is_affine_in_scale(seed in any::<u64>(), s in 0.0f64..8.0) {
        let (p, n) = (points(3, 3, seed), points(3, 3, seed ^ 1));
        let at = |s| guidance_combine(&p, &n, s).unwrap();
        let mid = at(s).zip_map(&at(s + 2.0), |a, b| 0.5 * (a + b)).unwrap();
        prop_assert!(mid.max_abs_diff(&at(s + 1.0)) < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let a = points(30, 4, seed);
        let b = points(25, 4, seed ^ 7).map(|v| 1.5 * v + shift).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab));
    }

    #[test]
    fn kid_is_symmetric_and_sees_a_shift(seed in any::<u64>()) {
        let a = points(12, 3, seed);
        let b = points(10, 3, seed ^ 3);
        prop_assert!((kid_mmd(&a, &b).unwrap() - kid_mmd(&b, &a).unwrap()).abs() < 1e-10);
        let far = b.map(|v| v + 4.0).unwrap();
        prop_assert!(kid_mmd(&a, &far).unwrap() > kid_mmd(&a, &b).unwrap());
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn identity_similarity_is_a_bounded_cosine(seed in any::<u64>()) {
        let rec = recognizer(seed);
        let mut r = rng(seed ^ 5);
        let a = Tensor::from_fn(&[4, 4, 3], |_| rand::Rng::random::<f64>(&mut r));
        let b = Tensor::from_fn(&[4, 4, 3], |_| rand::Rng::random::<f64>(&mut r));
        let s = identity_similarity(&a, &b, &rec).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((identity_similarity(&a, &a, &rec).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pva_without_visual_is_cross_attention(seed in any::<u64>(), heads in 1usize..4) {
        let mut r = rng(seed);
        let width = 4 * heads;
        let block = PvaBlock::random(width, heads, &mut r).unwrap();
        let f = Tensor::randn(&[5, width], 1.0, &mut r);
        let g = Tensor::randn(&[3, width], 1.0, &mut r);
        prop_assert!(block.pva_attention(&f, &g, None).unwrap().bit_eq(&block.cross_attention(&f, &g).unwrap()));
    }

    #[test]
    fn encoder_ignores_reference_order(seed in any::<u64>(), m in 1usize..6, rot in 0usize..5) {
        let cfg = DenoiserConfig { width: 16, heads: 2, n_query: 3, feature_dim: 8, encoder_blocks: 1, ..DenoiserConfig::default() };
        let params = init_encoder(&cfg, seed).unwrap();
        let feats = points(m, cfg.feature_dim, seed ^ 11);
        let rows: Vec<&[f64]> = (0..m).map(|i| feats.row((i + rot) % m)).collect();
        let rotated = Tensor::from_rows(&rows).unwrap();
        let a = encode_identity(&params, &cfg, &feats).unwrap();
        let b = encode_identity(&params, &cfg, &rotated).unwrap();
        prop_assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-9);
    }

    #[test]
    fn dilation_contains_the_box(x0 in 0usize..12, y0 in 0usize..12, w in 1usize..8, h in 1usize..8, d in 0.0f64..1.0) {
        let b = PixelBox { x0, y0, x1: x0 + w, y1: y0 + h };
        let out = dilate_box(&b, d).unwrap();
        prop_assert!(out.x0 <= x0 as i64 && out.y0 <= y0 as i64);
        prop_assert!(out.x1 >= (x0 + w) as i64 && out.y1 >= (y0 + h) as i64);
        let mask = build_semantic_mask(&b, 20, d).unwrap();
        prop_assert!(is_binary(&mask));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                prop_assert_eq!(mask.data()[y * 20 + x], 0.0);
            }
        }
    }

    #[test]
    fn stroke_masks_are_binary(seed in any::<u64>(), extent in 4usize..24) {
        let m = sample_random_mask(extent, &mut rng(seed), &StrokeParams::default()).unwrap();
        prop_assert_eq!(m.shape(), &[extent, extent][..]);
        prop_assert!(is_binary(&m));
    }

    #[test]
    fn blend_keeps_known_pixels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[4, 4, 3], 1.0, &mut r);
        let mask = sample_random_mask(4, &mut r, &StrokeParams::default()).unwrap();
        let masked = MaskedImage::new(&x, &mask).unwrap();
        let other = Tensor::randn(&[4, 4, 3], 1.0, &mut r);
        let out = masked.blend(&x, &other).unwrap();
        for (i, &m) in mask.data().iter().enumerate() {
            let src = if m == 1.0 { &x } else { &other };
            prop_assert_eq!(&out.data()[3 * i..3 * i + 3], &src.data()[3 * i..3 * i + 3]);
        }
    }

    #[test]
    fn stratified_times_stay_in_range(seed in any::<u64>(), m in 1usize..10, batch in 1usize..5, t_max in 10usize..300) {
        let times = stratified_times(m, batch, t_max, &mut rng(seed)).unwrap();
        prop_assert_eq!(times.len(), m);
        for (i, stratum) in times.iter().enumerate() {
            prop_assert_eq!(stratum.len(), batch);
            for &t in stratum {
                prop_assert!(t >= 1 && t <= t_max);
                prop_assert!(t > i * t_max / m && t <= ((i + 1) * t_max).div_ceil(m));
            }
        }
    }

    #[test]
    fn schedule_products_decrease(t_max in 2usize..400, start in 1e-5f64..1e-3, end in 1e-2f64..0.2) {
        let s = make_linear_schedule(t_max, start, end).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn lr_factor_decays_monotonically(steps in 2usize..500, frac in 0.0f64..1.0) {
        let cfg = TrainConfig { steps, final_lr_frac: frac, ..TrainConfig::toy(Phase::PvaStage1) };
        prop_assert!((cfg.lr_factor(0) - 1.0).abs() < 1e-12);
        prop_assert!((cfg.lr_factor(steps - 1) - frac).abs() < 1e-12);
        for k in 1..steps {
            prop_assert!(cfg.lr_factor(k) <= cfg.lr_factor(k - 1) + 1e-15);
        }
    }
}

#[test]
fn kid_on_disjoint_halves_is_centered() {
    let vals: Vec<f64> = (0..100)
        .map(|k| {
            let x = points(40, 4, 1000 + k);
            let (a, b) = (x.data()[..80].to_vec(), x.data()[80..].to_vec());
            kid_mmd(&Tensor::new(vec![20, 4], a).unwrap(), &Tensor::new(vec![20, 4], b).unwrap()).unwrap()
        })
        .collect();
    let (mean, sd) = mean_sd(&vals);
    let se = sd / (vals.len() as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
}
