//! Central finite-difference checks for every differentiable op (64-bit).

use iml_numerics::check::{gradcheck, op_checks, random_tensor};
use iml_numerics::{Graph, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_checks().unwrap();
    assert_eq!(checks.len(), 16);
    for (name, err) in checks {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        random_tensor(&mut rng, &[4, 5]),
        random_tensor(&mut rng, &[5, 6]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[6, 6]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[6, 3]),
    ];
    let err = gradcheck(&|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_bias(h, v[2])?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, v[3])?;
        let h = g.add_bias(h, v[4])?;
        let h = g.gelu(h)?;
        let logits = g.matmul(h, v[5])?;
        g.cross_entropy(logits, &[0, 2, 1, 2], &[true; 4])
    }, &inputs, STEP).unwrap();
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn a_wrong_gradient_is_detected() {
    // Detaching one operand hides its contribution from the backward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random_tensor(&mut rng, &[3, 3])];
    let err = gradcheck(&|g, v| {
        let frozen = g.constant(g.value(v[0]).clone());
        let y = g.mul(v[0], frozen)?;
        g.sum(y)
    }, &inputs, STEP).unwrap();
    assert!(err > 0.1, "relative error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_agree_with_finite_differences(rows in 1usize..4, inner in 1usize..5, cols in 2usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random_tensor(&mut rng, &[rows, inner]),
            random_tensor(&mut rng, &[inner, cols]),
            random_tensor(&mut rng, &[cols]),
            random_tensor(&mut rng, &[cols]),
        ];
        let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % cols).collect();
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3])?;
            let h = g.gelu(h)?;
            let s = g.softmax(h)?;
            let l = g.scale(s, 3.0)?;
            g.cross_entropy(l, &targets, &vec![true; rows])
        };
        let err = gradcheck(&build, &inputs, STEP).unwrap();
        prop_assert!(err < TOL, "relative error {err:e}");
    }
}
