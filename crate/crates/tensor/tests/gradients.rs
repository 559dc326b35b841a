use gdcn_tensor::{grad_check, OpKind, Tape, Tensor, Var};
use proptest::prelude::*;

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    // xorshift keeps the fixtures independent of any RNG crate.
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            lo + (hi - lo) * ((state >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts the op output with fixed random weights so every output
/// element contributes to the scalar being checked.
fn projected(tape: &mut Tape, out: Var, seed: u64) -> gdcn_tensor::Result<Var> {
    let w = random_tensor(tape.shape(out).to_vec(), seed ^ 0xABCD, -1.0, 1.0);
    let w = tape.leaf(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check_op(kind: OpKind, shapes: &[Vec<usize>], seed: u64, lo: f64, hi: f64) -> f64 {
    let params: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s.clone(), seed + 31 * i as u64, lo, hi))
        .collect();
    grad_check(
        |tape, vars| {
            let out = tape.apply(kind, vars)?;
            projected(tape, out, seed)
        },
        &params,
        1e-5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_match_finite_differences(seed in 1u64..1_000_000, n in 1usize..4, d in 1usize..5) {
        let mat = vec![n, d];
        let cases: Vec<(OpKind, Vec<Vec<usize>>)> = vec![
            (OpKind::MatMul, vec![mat.clone(), vec![d, 3]]),
            (OpKind::Transpose, vec![mat.clone()]),
            (OpKind::Add, vec![mat.clone(), mat.clone()]),
            (OpKind::Sub, vec![mat.clone(), mat.clone()]),
            (OpKind::Mul, vec![mat.clone(), mat.clone()]),
            (OpKind::Scale(-1.7), vec![mat.clone()]),
            (OpKind::AddScalar(0.3), vec![mat.clone()]),
            (OpKind::AddBias, vec![mat.clone(), vec![d]]),
            (OpKind::Concat, vec![mat.clone(), vec![n, 2], mat.clone()]),
            (OpKind::Concat, vec![vec![d], vec![2]]),
            (OpKind::Relu, vec![mat.clone()]),
            (OpKind::Tanh, vec![mat.clone()]),
            (OpKind::Exp, vec![mat.clone()]),
            (OpKind::ClampMin(0.25), vec![mat.clone()]),
            (OpKind::Sum, vec![mat.clone()]),
            (OpKind::Mean, vec![mat.clone()]),
            (OpKind::SumSq, vec![mat.clone()]),
            (OpKind::SumRows, vec![mat.clone()]),
            (OpKind::CosineSim, vec![mat.clone(), mat.clone()]),
            (OpKind::CosineSim, vec![vec![d + 1], vec![d + 1]]),
            (OpKind::NormalizeRows, vec![mat.clone()]),
            (OpKind::NormalizeRows, vec![vec![d + 1]]),
            (OpKind::RepeatRows(3), vec![mat.clone()]),
            (OpKind::MeanBlocks(2), vec![vec![2 * n, d]]),
        ];
        for (kind, shapes) in cases {
            let err = check_op(kind, &shapes, seed, -2.0, 2.0);
            prop_assert!(err <= 1e-6, "{:?} error {}", kind, err);
        }
        // log needs a positive domain
        let err = check_op(OpKind::Log, &[mat], seed, 0.5, 2.0);
        prop_assert!(err <= 1e-6, "log error {}", err);
    }

    #[test]
    fn backward_is_linear_in_the_root(seed in 1u64..1_000_000) {
        let x0 = random_tensor(vec![3, 4], seed, -2.0, 2.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let t = tape.tanh(x).unwrap();
        let r1 = tape.sum_sq(t).unwrap();
        let e = tape.exp(x).unwrap();
        let r2 = tape.mean(e).unwrap();
        let both = tape.add(r1, r2).unwrap();
        let g1 = tape.backward(r1).unwrap().get(x);
        let g2 = tape.backward(r2).unwrap().get(x);
        let g = tape.backward(both).unwrap().get(x);
        for i in 0..g.len() {
            prop_assert!((g.data()[i] - g1.data()[i] - g2.data()[i]).abs() <= 1e-12);
        }
    }
}

fn two_layer(tape: &mut Tape, v: &[Var]) -> gdcn_tensor::Result<Var> {
    // v = [x, w1, b1, w2, b2]
    let h = tape.matmul(v[0], v[1])?;
    let h = tape.add_bias(h, v[2])?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, v[3])?;
    let o = tape.add_bias(o, v[4])?;
    tape.sum_sq(o)
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let params = vec![
        random_tensor(vec![5, 4], 1, -2.0, 2.0),
        random_tensor(vec![4, 6], 2, -1.0, 1.0),
        random_tensor(vec![6], 3, -0.5, 0.5),
        random_tensor(vec![6, 3], 4, -1.0, 1.0),
        random_tensor(vec![3], 5, -0.5, 0.5),
    ];
    let err = grad_check(two_layer, &params, 1e-5).unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn replaying_a_tape_is_bit_identical() {
    let params = [
        random_tensor(vec![5, 4], 9, -2.0, 2.0),
        random_tensor(vec![4, 6], 8, -1.0, 1.0),
        random_tensor(vec![6], 7, -0.5, 0.5),
        random_tensor(vec![6, 3], 6, -1.0, 1.0),
        random_tensor(vec![3], 5, -0.5, 0.5),
    ];
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = two_layer(&mut tape, &vars).unwrap();
        let grads = tape.backward(root).unwrap();
        let mut bits: Vec<u64> = vec![tape.value(root).item().to_bits()];
        for v in &vars {
            bits.extend(grads.get(*v).data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}
