use mixmask_core::autodiff::gradcheck::{self, Case, PRIMITIVES};
use mixmask_core::autodiff::Tensor;
use mixmask_core::objectives::contrastive_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 100;
const TOL: f64 = 1e-4;

#[test]
fn primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for name in PRIMITIVES {
        let worst = (0..CASES)
            .map(|_| gradcheck::check(&gradcheck::primitive_case(name, &mut rng), &mut rng).unwrap())
            .fold(0.0, f64::max);
        assert!(worst < TOL, "{name}: {worst:e}");
    }
}

#[test]
fn contrastive_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..CASES {
        let (b, d) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut t = |s: &[usize]| Tensor::param((0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(), s).unwrap();
        let c = Case {
            inputs: vec![t(&[b, d]), t(&[b, d]), t(&[b, d]), t(&[d, d])],
            f: Box::new(|x| contrastive_loss(&x[0], &x[1], &x[2], &x[3])),
        };
        let err = gradcheck::check(&c, &mut rng).unwrap();
        assert!(err < TOL, "{err:e}");
    }
}
