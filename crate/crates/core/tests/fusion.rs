mod common;

use mmgs_core::deformation::initialize_gaussian_attributes;
use mmgs_core::fusion::*;
use mmgs_core::rasterizer::GaussianTensors;
use mmgs_diffgrad::nn::Module;
use mmgs_diffgrad::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn randomize(module: &impl Module<f64>, rng: &mut impl Rng, amp: f64) {
    for (_, p) in module.named_params("m") {
        p.update_data(|d| d.iter_mut().for_each(|x| *x = rng.gen_range(-amp..amp)));
    }
}

proptest! {
    #[test]
    fn coefficients_sum_to_one(
        n in 1usize..8,
        gamma in 0.0f64..3.0,
        vis in prop::collection::vec(any::<bool>(), 8),
    ) {
        for visible in [None, Some(&vis[..n])] {
            let c = fusion_coefficients(n, gamma, visible);
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(c.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn fusion_ignores_view_order(seed in any::<u64>(), n in 1usize..6, gamma in 0.0f64..2.0) {
        let mut rng = common::rng(seed);
        let views: Vec<Tensor<f64>> = (0..n).map(|_| random_tensor(&mut rng, &[5, 7])).collect();
        let mut reversed = views.clone();
        reversed.reverse();
        let a = cross_view_fuse(&views, gamma, None).unwrap().to_vec();
        let b = cross_view_fuse(&reversed, gamma, None).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // The fused feature is a convex combination, so it stays in the hull.
        for (i, x) in a.iter().enumerate() {
            let lo = views.iter().map(|v| v.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = views.iter().map(|v| v.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
    }

    #[test]
    fn decoder_is_pointwise_with_a_pooled_instance_feature(seed in any::<u64>(), g in 2usize..9) {
        let mut rng = common::rng(seed);
        let decoder = FusionDecoder::<f64>::new(1, 64, &mut rng);
        randomize(&decoder, &mut rng, 0.3);
        let fused = random_tensor(&mut rng, &[g, view_feature_dim(1)]);
        let perm: Vec<usize> = (0..g).rev().collect();
        let a = decoder.decode(&fused);
        let b = decoder.decode(&fused.gather_rows(&perm));
        prop_assert_eq!(b.color.to_vec(), a.color.gather_rows(&perm).to_vec());
        prop_assert_eq!(b.rotation.to_vec(), a.rotation.gather_rows(&perm).to_vec());
        for (x, y) in a.instance_feature.to_vec().iter().zip(b.instance_feature.to_vec()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn refined_rotations_are_unit_and_centers_are_shared() {
    let mut rng = common::rng(6);
    let centers: Vec<[f64; 3]> = (0..12).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    let g0 = GaussianTensors::from_set(&initialize_gaussian_attributes(&centers, 1, 0.01), false);
    let decoder = FusionDecoder::<f64>::new(1, 64, &mut rng);
    randomize(&decoder, &mut rng, 0.5);
    let lifted = random_tensor(&mut rng, &[12, FEATURE_CHANNELS]);
    let r = decoder.decode(&view_dependent_features(&lifted, &g0));
    let g1 = apply_fusion(&g0, &r);
    assert!(g1.centers.ptr_eq(&g0.centers));
    for q in g1.rotation.to_vec().chunks(4) {
        assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }
    assert_eq!(r.instance_feature.shape(), &[64]);
}

#[test]
fn encoder_commutes_with_translation_in_the_interior() {
    let mut rng = common::rng(2);
    let encoder = ImageEncoder::<f64>::new(&mut rng);
    let (h, w) = (14, 16);
    let img = random_tensor(&mut rng, &[h, w, 3]).to_vec();
    let mut shifted = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 1..w {
            for c in 0..3 {
                shifted[(y * w + x) * 3 + c] = img[(y * w + x - 1) * 3 + c];
            }
        }
    }
    let a = encoder.encode(&Tensor::new(&[h, w, 3], img)).to_vec();
    let b = encoder.encode(&Tensor::new(&[h, w, 3], shifted)).to_vec();
    let c = FEATURE_CHANNELS;
    assert_eq!(a.len(), h * w * c);
    // Three 3x3 layers see three pixels each way; skip that border.
    for y in 3..h - 3 {
        for x in 4..w - 3 {
            for k in 0..c {
                assert!((b[(y * w + x) * c + k] - a[(y * w + x - 1) * c + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lifting_conventions() {
    let cam = common::axis_camera(8, 6, 10.0);
    let map = Tensor::new(&[6, 8, 2], (0..96).map(|i| i as f64).collect());
    // Behind the camera, off the image, and on the pixel grid.
    let pts = [[0.0, 0.0, -1.0], [5.0, 0.0, 1.0], [0.1, -0.15, 1.0]];
    let f = lift_features(&map, &pts, &cam).to_vec();
    assert_eq!(&f[..4], &[0.0; 4]);
    // (0.1, -0.15, 1) lands on pixel (4.5, 1.0): the mean of columns 4 and 5 of row 1.
    let row = 8;
    for ch in 0..2 {
        let expect = 0.5 * (map.data()[(row + 4) * 2 + ch] + map.data()[(row + 5) * 2 + ch]);
        assert!((f[4 + ch] - expect).abs() < 1e-12);
    }
}

#[test]
fn context_views_pad_with_invisible_cameras_in_id_order() {
    assert_eq!(select_context_views(&[(0, 100), (1, 400), (2, 0), (3, 250)], 2), vec![1, 3]);
    assert_eq!(select_context_views(&[(0, 0), (1, 9), (2, 0), (3, 0)], 3), vec![1, 0, 2]);
    assert_eq!(select_context_views(&[(3, 5), (1, 5), (2, 5)], 3), vec![1, 2, 3]);
}

#[test]
fn occluded_points_fail_the_depth_test() {
    let cam = common::axis_camera(16, 16, 20.0);
    let front = [0.0, 0.0, 1.0];
    let back = [0.0, 0.0, 3.0];
    let side = [0.2, 0.0, 3.0];
    let vis = depth_visibility(&[front, back, side], &[front, back, side], &cam, 0.05);
    assert_eq!(vis, vec![true, false, true]);
}
