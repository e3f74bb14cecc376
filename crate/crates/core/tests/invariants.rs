use std::sync::Arc;

use mpa_codec::autodiff::{Graph, ParameterStore, Tensor};
use mpa_codec::entropy::{
    build_gaussian_cdf, build_logistic_cdf, quality_to_fixed, range_decode, range_encode, CdfTable, Container,
};
use mpa_codec::routing::{
    binarize_mask_infer, dense_oracle, mpa_apply, target_count, ImportanceMask, PathKind, PathSpec, StageMask,
};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![h, w, 1], v[..h * w].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn mask_has_target_cardinality(h in 1usize..9, w in 1usize..9, v in vec(-3.0f64..3.0, 64), rho in 0.0f64..=1.0) {
        let m = binarize_mask_infer(&scores(h, w, &v), rho).unwrap();
        prop_assert_eq!(m.popcount(), target_count(rho, h * w));
        prop_assert_eq!(m.popcount(), ((rho * (h * w) as f64).round() as usize).min(h * w));
    }

    #[test]
    fn masks_nest_as_ratio_grows(h in 1usize..9, w in 1usize..9, v in vec(-3.0f64..3.0, 64), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s = scores(h, w, &v);
        let (ml, mh) = (binarize_mask_infer(&s, lo).unwrap(), binarize_mask_infer(&s, hi).unwrap());
        for (x, y) in ml.bits().iter().zip(mh.bits()) {
            prop_assert!(!x || *y);
        }
    }

    #[test]
    fn ties_break_by_raster_order(h in 1usize..6, w in 1usize..6, rho in 0.0f64..=1.0) {
        let m = binarize_mask_infer(&Tensor::<f64>::zeros(&[h, w, 1]), rho).unwrap();
        let k = m.popcount();
        prop_assert!(m.bits()[..k].iter().all(|&b| b) && m.bits()[k..].iter().all(|&b| !b));
    }

    #[test]
    fn gathered_routing_equals_dense_blend(
        h in 1usize..6, w in 1usize..6, half in 1usize..5, bits in vec(any::<bool>(), 36), seed in 0u64..1000,
    ) {
        let c = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::<f64>::new();
        let main = PathSpec::new(PathKind::InvertedBottleneck, c, "main").unwrap();
        let side = PathSpec::new(PathKind::Bottleneck, c, "side").unwrap();
        main.init(&mut s, &mut rng).unwrap();
        side.init(&mut s, &mut rng).unwrap();
        let x = mpa_codec::init::uniform(&mut rng, &[h, w, c], 1);
        let mask = ImportanceMask::from_bits(h, w, bits[..h * w].to_vec()).unwrap();

        let g = Graph::inference();
        let xv = g.constant(x);
        let routed = g.value(mpa_apply(&g, &s, xv, &StageMask::Hard(Arc::new(mask.clone())), &main, &side, None).unwrap());
        let dense = g.value(dense_oracle(&g, &s, xv, g.constant(mask.to_tensor()), &main, &side).unwrap());
        for (a, b) in routed.data().iter().zip(dense.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn range_coder_roundtrips(
        params in vec((-4.0f64..4.0, 0.11f64..6.0, -30i32..30, any::<bool>()), 0..300),
    ) {
        let tables: Vec<CdfTable> = params
            .iter()
            .map(|&(mu, sigma, _, logistic)| {
                if logistic { build_logistic_cdf(mu, sigma).unwrap() } else { build_gaussian_cdf(mu, sigma).unwrap() }
            })
            .collect();
        let refs: Vec<&CdfTable> = tables.iter().collect();
        let symbols: Vec<i32> = params.iter().map(|p| p.2).collect();
        let bytes = range_encode(&symbols, &refs).unwrap();
        prop_assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols);
    }

    #[test]
    fn container_roundtrips(
        q in 1.0f64..8.0, w in 1u32..5000, h in 1u32..5000, z in vec(any::<u8>(), 0..64), y in vec(any::<u8>(), 0..256),
    ) {
        let c = Container { quality: quality_to_fixed(q).unwrap(), width: w, height: h, z_bytes: z, y_bytes: y };
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(Container::from_bytes(&bytes).unwrap(), c.clone());
        prop_assert!((c.q() - q).abs() <= 0.5 / 256.0);
        // any strict prefix is rejected
        prop_assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected(b in any::<u8>(), at in 0usize..4) {
        let c = Container { quality: 256, width: 1, height: 1, z_bytes: vec![], y_bytes: vec![] };
        let mut bytes = c.to_bytes().unwrap();
        prop_assume!(bytes[at] != b);
        bytes[at] = b;
        prop_assert!(Container::from_bytes(&bytes).is_err());
    }
}

mod stream {
    use mpa_codec::entropy::{compress, decode_latents};
    use mpa_codec::model::{Image, ModelConfig};
    use mpa_codec::train::init_stage1;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn latents_survive_the_bitstream(w in 1usize..40, h in 1usize..40, q in 1.0f64..=8.0, seed in any::<u64>()) {
            let (codec, store) = init_stage1(ModelConfig::tiny(), 9).unwrap();
            let mut x = seed;
            let data = (0..w * h * 3).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 56) as u8 }).collect();
            let c = compress(&codec, &store, &Image::new(w, h, 3, data).unwrap(), q).unwrap();
            let l = decode_latents(&codec, &store, &c.bytes).unwrap();
            let bits = |t: &mpa_codec::autodiff::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&c.y_hat), bits(&l.y_hat));
            prop_assert_eq!(bits(&c.z_hat), bits(&l.z_hat));
        }
    }
}
