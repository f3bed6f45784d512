use embedit_core::blocks::tensor_average;
use embedit_core::container::{Container, NamedTensor, GENERATOR_MAGIC};
use embedit_core::masks::{blur, dilate, nn_downsample, Mask};
use embedit_core::metrics::{psnr, ssim};
use embedit_core::perceptual::{gram, FeatureMap, VggLayer};
use embedit_core::recipe::{EditKind, EditRecipe};
use embedit_core::synthesis::{ActivationTensor, NoiseBank, NoiseMap, StyleCode};
use embedit_core::tensor::Tensor3;
use embedit_core::{latent_file, ImageBuffer};
use proptest::prelude::*;

fn mask_strategy(max_side: usize) -> impl Strategy<Value = Mask> {
    (2..=max_side).prop_flat_map(|side| {
        prop::collection::vec(0.0..=1.0f64, side * side).prop_map(move |d| Mask::new(side, side, d).unwrap())
    })
}

fn binary_mask_strategy(max_side: usize) -> impl Strategy<Value = Mask> {
    (2..=max_side).prop_flat_map(|side| {
        prop::collection::vec(any::<bool>(), side * side)
            .prop_map(move |d| Mask::new(side, side, d.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
    })
}

fn image_pair(max_side: usize) -> impl Strategy<Value = (ImageBuffer, ImageBuffer)> {
    (1..=max_side).prop_flat_map(|side| {
        let n = side * side * 3;
        (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(0.0..=1.0f64, n)).prop_map(move |(a, b)| {
            (ImageBuffer::new(side, side, a).unwrap(), ImageBuffer::new(side, side, b).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn complement_is_an_involution_on_binary_masks(m in binary_mask_strategy(12)) {
        prop_assert_eq!(m.complement().complement(), m);
    }

    #[test]
    fn blur_stays_in_unit_range(m in mask_strategy(12), sigma in 0.3..4.0f64, radius in 1usize..6) {
        let b = blur(&m, sigma, radius).unwrap();
        prop_assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blurred_support_grows_with_radius(m in binary_mask_strategy(12), sigma in 0.5..3.0f64, r in 1usize..4) {
        let small = blur(&m, sigma, r).unwrap().support(1e-12);
        let large = blur(&m, sigma, r + 1).unwrap().support(1e-12);
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn dilation_is_monotone(m in binary_mask_strategy(12), r in 1usize..4) {
        let a = dilate(&m, r);
        let b = dilate(&m, r + 1);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(x <= y);
        }
        for (x, y) in m.data().iter().zip(a.data()) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn nearest_downsampling_keeps_masks_binary(m in binary_mask_strategy(16), h in 1usize..8, w in 1usize..8) {
        let h = h.min(m.height());
        let w = w.min(m.width());
        let d = nn_downsample(&m, h, w).unwrap();
        prop_assert!(d.is_binary());
        prop_assert_eq!((d.height(), d.width()), (h, w));
    }

    #[test]
    fn psnr_and_ssim_are_symmetric((a, b) in image_pair(14)) {
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&b, &a, 1.0).unwrap();
        prop_assert_eq!(p1, p2);
        let s1 = ssim(&a, &b, 1.0).unwrap();
        let s2 = ssim(&b, &a, 1.0).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one((a, _) in image_pair(14)) {
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantized_images_survive_png(side in 1usize..10, bytes in prop::collection::vec(any::<u8>(), 300)) {
        let px: Vec<f64> = (0..side * side * 3).map(|i| bytes[i % bytes.len()] as f64 / 255.0).collect();
        let img = ImageBuffer::new(side, side, px).unwrap();
        prop_assert_eq!(ImageBuffer::decode_png(&img.encode_png()).unwrap(), img);
    }

    #[test]
    fn quantized_masks_survive_png(side in 1usize..10, bytes in prop::collection::vec(any::<u8>(), 100)) {
        let d: Vec<f64> = (0..side * side).map(|i| bytes[i % bytes.len()] as f64 / 255.0).collect();
        let m = Mask::new(side, side, d).unwrap();
        prop_assert_eq!(Mask::decode_png(&m.encode_png()).unwrap(), m);
    }

    #[test]
    fn latent_files_round_trip(
        layers in 1usize..6,
        dim in 1usize..9,
        sides in prop::collection::vec(1usize..6, 0..4),
        seed in any::<u64>(),
    ) {
        let mut x = seed;
        let mut next = move || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from_bits((x >> 2) | 0x3ff0_0000_0000_0000) - 1.5
        };
        let w = StyleCode::new(layers, dim, (0..layers * dim).map(|_| next()).collect()).unwrap();
        let maps = sides.iter().map(|&s| NoiseMap { side: s, data: (0..s * s).map(|_| next()).collect() }).collect();
        let n = NoiseBank::new(maps).unwrap();
        let (w2, n2) = latent_file::decode(&latent_file::encode(&w, &n)).unwrap();
        prop_assert_eq!(w2, w);
        prop_assert_eq!(n2, n);
    }

    #[test]
    fn containers_round_trip(values in prop::collection::vec(-1e3..1e3f32, 1..40), header in any::<[u32; 3]>()) {
        let mut c = Container::new(GENERATOR_MAGIC, header);
        c.push(NamedTensor { name: "a".into(), dims: vec![values.len()], data: values.clone() });
        c.push(NamedTensor { name: "b.weight".into(), dims: vec![1, values.len()], data: values });
        let back = Container::from_bytes(&c.to_bytes(), GENERATOR_MAGIC).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn recipes_print_and_parse_back(seed in any::<u64>(), variations in 1usize..64, divisor in 1usize..10) {
        let r = EditRecipe::new(EditKind::Inpaint)
            .with("image", "defect.png")
            .with("mask", "holes/m 1.png")
            .with("seed", seed.to_string())
            .with("variations", variations.to_string())
            .with("iteration_divisor", divisor.to_string());
        prop_assert_eq!(EditRecipe::parse(&r.to_string()).unwrap(), r);
    }

    #[test]
    fn gram_is_symmetric(c in 1usize..5, side in 1usize..6, vals in prop::collection::vec(-2.0..2.0f64, 150), mvals in prop::collection::vec(0.0..1.0f64, 36)) {
        let p = side * side;
        let data = Tensor3::from_vec(c, side, side, (0..c * p).map(|i| vals[i % vals.len()]).collect()).unwrap();
        let mask = Mask::new(side, side, (0..p).map(|i| mvals[i % mvals.len()]).collect()).unwrap();
        let g = gram(&FeatureMap { layer: VggLayer::Conv1_2, data }, &mask).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(g[i * c + j], g[j * c + i]);
            }
        }
    }

    #[test]
    fn tensor_average_endpoints_are_exact(vals in prop::collection::vec(-5.0..5.0f64, 24), other in prop::collection::vec(-5.0..5.0f64, 24)) {
        let a = ActivationTensor { layer: 3, data: Tensor3::from_vec(2, 3, 4, vals).unwrap() };
        let b = ActivationTensor { layer: 3, data: Tensor3::from_vec(2, 3, 4, other).unwrap() };
        prop_assert_eq!(tensor_average(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(tensor_average(&a, &b, 0.0).unwrap(), b);
    }
}
