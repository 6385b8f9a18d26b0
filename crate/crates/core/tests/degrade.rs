use aren::degrade::{
    blind_mask, gaussian_blur, gaussian_kernel_1d, gaussian_noise, noise_field, reflect_index, DegradeKind, DegradeSpec,
};
use aren::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, h, w, 3], |_| rng.random())
}

/// Direct 2-D convolution with the outer-product kernel and reflected
/// borders, one output pixel at a time.
fn dense_blur(img: &Tensor<f32>, sx: f64, sy: f64, kx: usize, ky: usize) -> Vec<f64> {
    let (b, h, w, c) = img.dims4().unwrap();
    let gx = gaussian_kernel_1d(sx, kx);
    let gy = gaussian_kernel_1d(sy, ky);
    let (rx, ry) = ((kx / 2) as isize, (ky / 2) as isize);
    let mut out = vec![0.0; img.len()];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (u, &wy) in gy.iter().enumerate() {
                        for (v, &wx) in gx.iter().enumerate() {
                            let yy = reflect_index(y as isize + u as isize - ry, h);
                            let xx = reflect_index(x as isize + v as isize - rx, w);
                            acc += wy * wx * f64::from(img.data()[((bi * h + yy) * w + xx) * c + ch]);
                        }
                    }
                    out[((bi * h + y) * w + x) * c + ch] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn noise_std_matches_target_on_large_fixture() {
    for sigma in [0.2, 0.3, 0.4] {
        let field = noise_field(&[1, 256, 256, 3], sigma, 11, 0).unwrap();
        let n = field.len() as f64;
        let mean = field.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = field.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let rel = (var.sqrt() - sigma).abs() / sigma;
        assert!(rel < 0.02, "sigma {sigma}: sample std {}", var.sqrt());
    }
}

#[test]
fn noise_is_the_clamped_field_plus_image() {
    let img = random_image(2, 16, 16, 1);
    let noisy = gaussian_noise(&img, 0.3, 5).unwrap();
    let field = noise_field(img.shape(), 0.3, 5, 0).unwrap();
    for ((&o, &i), &n) in noisy.data().iter().zip(img.data()).zip(field.data()) {
        assert_eq!(o, (i + n).clamp(0.0, 1.0));
    }
    assert_eq!(gaussian_noise(&img, 0.0, 5).unwrap(), img);
}

#[test]
fn impulse_response_is_the_outer_product() {
    let (h, w) = (41, 41);
    let mut img = Tensor::<f32>::zeros(&[1, h, w, 3]);
    for ch in 0..3 {
        img.data_mut()[((20 * w) + 20) * 3 + ch] = 1.0;
    }
    for (sx, sy, kx, ky) in [(1.0, 5.0, 3, 15), (1.0, 3.0, 3, 15), (1.0, 8.0, 3, 15), (2.0, 2.0, 7, 7)] {
        let out = gaussian_blur(&img, sx, sy, kx, ky).unwrap();
        let gx = gaussian_kernel_1d(sx, kx);
        let gy = gaussian_kernel_1d(sy, ky);
        for y in 0..h {
            for x in 0..w {
                let dy = y as isize - 20;
                let dx = x as isize - 20;
                let expect = if dy.unsigned_abs() <= ky / 2 && dx.unsigned_abs() <= kx / 2 {
                    gy[(dy + (ky / 2) as isize) as usize] * gx[(dx + (kx / 2) as isize) as usize]
                } else {
                    0.0
                };
                let got = f64::from(out.data()[(y * w + x) * 3 + 1]);
                assert!((got - expect).abs() < 1e-6, "({y},{x}): {got} vs {expect}");
            }
        }
    }
}

#[test]
fn separable_blur_matches_dense_convolution() {
    let img = random_image(2, 20, 17, 3);
    let out = gaussian_blur(&img, 1.0, 5.0, 3, 15).unwrap();
    let dense = dense_blur(&img, 1.0, 5.0, 3, 15);
    for (&a, &b) in out.data().iter().zip(&dense) {
        assert!((f64::from(a) - b).abs() < 1e-6);
    }
}

#[test]
fn blur_preserves_constant_images() {
    let img = Tensor::full(&[1, 9, 9, 3], 0.37f32);
    let out = gaussian_blur(&img, 1.0, 8.0, 3, 15).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
}

#[test]
fn spec_dispatch_matches_direct_calls() {
    let img = random_image(3, 12, 12, 4);
    let mask = DegradeSpec {
        kind: DegradeKind::Mask { fraction: 0.5 },
        seed: 9,
    }
    .apply(&img, 0)
    .unwrap();
    let (direct, m) = blind_mask(&img, 0.5, 9).unwrap();
    assert_eq!(mask.image, direct);
    assert_eq!(mask.mask.unwrap(), m);
    let blur = DegradeSpec {
        kind: DegradeKind::Blur {
            sigma: (1.0, 5.0),
            ksize: (3, 15),
        },
        seed: 0,
    };
    assert_eq!(blur.apply(&img, 0).unwrap().image, gaussian_blur(&img, 1.0, 5.0, 3, 15).unwrap());
    let bad = DegradeSpec {
        kind: DegradeKind::Blur {
            sigma: (1.0, 5.0),
            ksize: (4, 15),
        },
        seed: 0,
    };
    assert!(bad.apply(&img, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_count_is_exact_for_any_fraction(f in 0.0f64..=1.0, h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
        let img = random_image(2, h, w, seed).map(|v| v + 0.01);
        let (out, mask) = blind_mask(&img, f, seed).unwrap();
        let expect = (f * (h * w) as f64 + 1e-9).floor() as usize;
        for bi in 0..2 {
            let m = &mask.data()[bi * h * w..(bi + 1) * h * w];
            prop_assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), expect);
        }
        prop_assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 3 * 2 * expect);
    }

    #[test]
    fn noise_stays_in_range(sigma in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = random_image(1, 8, 8, seed);
        let out = gaussian_noise(&img, sigma, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out, gaussian_noise(&img, sigma, seed).unwrap());
    }
}
