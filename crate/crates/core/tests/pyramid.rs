use embinvert_core::pyramid::{build, build_adjoint, collapse, lpgn, LPGN_EPSILON};
use embinvert_core::{Rng, Tensor};
use proptest::prelude::*;

fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).unwrap()
}

#[test]
fn collapse_inverts_build() {
    let mut rng = Rng::new(0x9E);
    for i in 0..20 {
        let p = Tensor::from_fn(&[32, 32, 3], |_| rng.uniform()).unwrap();
        for levels in 1..=3 {
            let back = collapse(&build(&p, levels).unwrap()).unwrap();
            let err = back.max_abs_diff(&p).unwrap();
            assert!(err <= 1e-12, "image {i}, {levels} levels: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn adjoint_identity(seed in any::<u64>(), levels in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let dims = [16, 8, c];
        let p = random(&dims, &mut rng);
        let pyr = build(&p, levels).unwrap();
        let bands: Vec<Tensor> = pyr.bands.iter().map(|b| random(b.dims(), &mut rng)).collect();
        let top = random(pyr.top.dims(), &mut rng);
        let lhs: f64 = pyr.bands.iter().zip(&bands).map(|(a, b)| a.dot(b).unwrap()).sum::<f64>()
            + pyr.top.dot(&top).unwrap();
        let rhs = p.dot(&build_adjoint(&bands, &top).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    /// Normalization removes the gradient's overall scale.
    #[test]
    fn lpgn_is_scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let g = random(&[16, 16, 3], &mut rng);
        let a = lpgn(&g, 2, 0.0).unwrap();
        let b = lpgn(&g.scale(s).unwrap(), 2, 0.0).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10 * a.max_abs().max(1.0));
    }
}

#[test]
fn lpgn_fixed_point_is_unchanged() {
    let mut g = random(&[16, 16, 3], &mut Rng::new(77));
    for _ in 0..400 {
        g = lpgn(&g, 2, LPGN_EPSILON).unwrap();
    }
    let rms = |t: &Tensor| t.norm() / (t.len() as f64).sqrt();
    let pyr = build(&g, 2).unwrap();
    for b in pyr.bands.iter().chain(std::iter::once(&pyr.top)) {
        assert!((rms(b) - 1.0).abs() < 1e-6, "{}", rms(b));
    }
    let again = lpgn(&g, 2, LPGN_EPSILON).unwrap();
    assert!(again.max_abs_diff(&g).unwrap() < 1e-6);
}
