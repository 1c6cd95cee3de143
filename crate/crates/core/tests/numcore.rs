use embinvert_core::numcore::{eit, Conv2d, Deconv2d, FullyConnected, Rng, Tensor};
use proptest::prelude::*;

fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).unwrap()
}

/// Swaps the channel axes of a `kh×kw×A×B` kernel.
fn transpose_channels(k: &Tensor) -> Tensor {
    let d = k.dims();
    let (kh, kw, a, b) = (d[0], d[1], d[2], d[3]);
    let mut out = vec![0.0; k.len()];
    for i in 0..kh {
        for j in 0..kw {
            for x in 0..a {
                for y in 0..b {
                    out[((i * kw + j) * b + y) * a + x] = k.data()[((i * kw + j) * a + x) * b + y];
                }
            }
        }
    }
    Tensor::new(vec![kh, kw, b, a], out).unwrap()
}

/// Direct stride-1 "same" correlation with zero padding, written from the
/// definition.
fn naive_same_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, cin) = x.hwc().unwrap();
    let (kh, kw, cout) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    Tensor::from_fn(&[h, w, cout], |idx| {
        let (y, xx, co) = (idx / (w * cout), (idx / cout) % w, idx % cout);
        let mut acc = b.data()[co];
        for i in 0..kh {
            for j in 0..kw {
                let (sy, sx) = (y as isize + i as isize - ph as isize, xx as isize + j as isize - pw as isize);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                for ci in 0..cin {
                    acc += x.at(sy as usize, sx as usize, ci) * k.data()[((i * kw + j) * cin + ci) * cout + co];
                }
            }
        }
        acc
    })
    .unwrap()
}

#[test]
fn stride_one_conv_matches_direct_sum() {
    let mut rng = Rng::new(41);
    for _ in 0..6 {
        let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
        let dims = [3 + rng.below(5), 3 + rng.below(5), cin];
        let k = random(&[3, 3, cin, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        let x = random(&dims, &mut rng);
        let conv = Conv2d::new(k.clone(), b.clone(), 1, dims).unwrap();
        let diff = conv.forward(&x).unwrap().max_abs_diff(&naive_same_conv(&x, &k, &b)).unwrap();
        assert!(diff < 1e-13, "{diff}");
    }
}

#[test]
fn fc_matches_matrix_product() {
    let mut rng = Rng::new(42);
    let (n_in, n_out) = (12, 5);
    let k = random(&[n_in, n_out], &mut rng);
    let b = random(&[n_out], &mut rng);
    let x = random(&[2, 2, 3], &mut rng);
    let fc = FullyConnected::new(k.clone(), b.clone(), vec![2, 2, 3], vec![n_out]).unwrap();
    let y = fc.forward(&x).unwrap();
    for j in 0..n_out {
        let want: f64 = b.data()[j] + (0..n_in).map(|i| x.data()[i] * k.data()[i * n_out + j]).sum::<f64>();
        assert!((y.data()[j] - want).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Transposed convolution is the adjoint of the stride-2 convolution
    /// with the channel-transposed kernel.
    #[test]
    fn deconv_is_conv_adjoint(
        seed in any::<u64>(),
        h in 1usize..6,
        w in 1usize..6,
        a in 1usize..4,
        b in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut rng = Rng::new(seed);
        let kernel = random(&[k, k, a, b], &mut rng);
        let conv = Conv2d::new(kernel.clone(), Tensor::zeros(&[b]), 2, [2 * h, 2 * w, a]).unwrap();
        let deconv = Deconv2d::new(transpose_channels(&kernel), Tensor::zeros(&[a]), 2, [h, w, b]).unwrap();
        let x = random(&[2 * h, 2 * w, a], &mut rng);
        let y = random(&[h, w, b], &mut rng);
        let lhs = conv.forward(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&deconv.forward(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn eit_roundtrip_is_bit_exact(seed in any::<u64>(), dims in prop::collection::vec(1usize..5, 1..4)) {
        let mut rng = Rng::new(seed);
        let t = Tensor::from_fn(&dims, |_| rng.normal() * 1e3).unwrap();
        let back = eit::decode(&eit::encode(&t)).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn derived_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::derived(seed, stream);
        let mut b = Rng::derived(seed, stream);
        for _ in 0..8 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        let u = Rng::new(seed).uniform();
        prop_assert!((0.0..1.0).contains(&u));
    }
}

#[test]
fn truncated_eit_is_rejected() {
    let bytes = eit::encode(&Tensor::filled(&[2, 2], 1.0));
    assert!(eit::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(eit::decode(b"EIT2").is_err());
}
