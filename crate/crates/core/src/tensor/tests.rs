use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, random_projection, random_tensor};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn relu_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_all_ones_is_nine() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[9.0]);
}

#[test]
fn conv_stride_and_padding_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2, 3, 16, 32], 1.0));
    let w = tape.constant(Tensor::full(&[5, 3, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 8, 16]);
    // interior output sees a full 3×3×3 window, the corner only 2×2×3
    let v = tape.value(y).data();
    assert_eq!(v[0], 12.0);
    assert_eq!(v[16 + 1], 27.0);
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax_last_dim(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[1.0; 4]);
}

#[test]
fn backward_of_square_sum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn untouched_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).data(), &[0.0; 3]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2], 1e30));
    assert_eq!(
        tape.scalar_mul(x, 1e30).unwrap_err(),
        TensorError::NonFinite { op: "scalar_mul" }
    );
}

#[test]
fn bilinear_center_and_midpoint() {
    let mut tape = Tape::<f64>::new();
    let img = tape.leaf(t(&[1, 1, 2], &[2.0, 4.0]));
    let coords = tape.leaf(t(&[2, 2], &[0.5, 0.5, 1.0, 0.5]));
    let out = tape.bilinear_sample(img, coords).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 3.0]);
    let mid = tape.select_batch(out, 1).unwrap();
    let s = tape.sum(mid).unwrap();
    let g = tape.backward(s).unwrap();
    // d/du at the midpoint is (4 - 2) per pixel; v is clamped on a 1-row image
    assert_eq!(g.get(coords).data(), &[0.0, 0.0, 2.0, 0.0]);

    let report = check_gradients(&[t(&[2], &[1.0, 0.5])], 1e-4, |tape, v| {
        let img = tape.constant(t(&[1, 1, 2], &[2.0, 4.0]));
        let c = tape.reshape(v[0], &[1, 2])?;
        let o = tape.bilinear_sample(img, c)?;
        tape.sum(o)
    })
    .unwrap();
    assert!((report.numeric[0][0] - 2.0).abs() < 1e-8);
    assert!(report.max_relative_error() < 1e-4);
}

#[test]
fn bilinear_clamp_kills_coordinate_gradient() {
    let mut tape = Tape::<f64>::new();
    let img = tape.constant(t(&[1, 2, 3], &[1.0, 5.0, 2.0, 7.0, 3.0, 4.0]));
    // u far left, v far below
    let coords = tape.leaf(t(&[2, 2], &[-3.0, 1.2, 1.7, 9.0]));
    let out = tape.bilinear_sample(img, coords).unwrap();
    let s = tape.sum(out).unwrap();
    let g = tape.backward(s).unwrap().get(coords);
    assert_eq!(g.data()[0], 0.0);
    assert_ne!(g.data()[1], 0.0);
    assert_ne!(g.data()[2], 0.0);
    assert_eq!(g.data()[3], 0.0);
    // clamped samples equal the edge values
    let left = tape.value(out).data()[0];
    assert!((left - (1.0 + 0.7 * (7.0 - 1.0))).abs() < 1e-12);
}

fn check_op(name: &str, shapes: &[&[usize]], tol: f64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..10 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, -1.0, 1.0, &mut rng)).collect();
        let report = check_gradients(&inputs, 1e-4, |tape, v| {
            let out = op(tape, v)?;
            random_projection(tape, out, instance)
        })
        .unwrap();
        let err = report.max_relative_error();
        assert!(err <= tol, "{name} instance {instance}: relative error {err:e}");
    }
}

#[test]
fn gradcheck_core_ops() {
    check_op("matmul", &[&[3, 4], &[4, 2]], 1e-4, |t, v| t.matmul(v[0], v[1]));
    check_op("matmul shared", &[&[2, 3, 4], &[4, 2]], 1e-4, |t, v| t.matmul(v[0], v[1]));
    check_op("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], 1e-4, |t, v| t.matmul(v[0], v[1]));
    check_op("linear", &[&[2, 3, 4], &[5, 4], &[5]], 1e-4, |t, v| t.linear(v[0], v[1], Some(v[2])));
    check_op("conv2d", &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], 1e-4, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    check_op("conv2d 1x1", &[&[1, 3, 4, 4], &[2, 3, 1, 1]], 1e-4, |t, v| t.conv2d(v[0], v[1], None, 1, 0));
    check_op("relu", &[&[3, 5]], 1e-4, |t, v| t.relu(v[0]));
    check_op("sigmoid", &[&[3, 5]], 1e-4, |t, v| t.sigmoid(v[0]));
    check_op("add", &[&[2, 3], &[2, 3]], 1e-4, |t, v| t.add(v[0], v[1]));
    check_op("mul", &[&[2, 3], &[2, 3]], 1e-4, |t, v| t.mul(v[0], v[1]));
    check_op("scalar_mul", &[&[2, 3]], 1e-4, |t, v| t.scalar_mul(v[0], -1.7));
    check_op("softmax", &[&[3, 4]], 1e-4, |t, v| t.softmax_last_dim(v[0]));
    check_op("sum", &[&[3, 4]], 1e-4, |t, v| t.sum(v[0]));
    check_op("mean", &[&[3, 4]], 1e-4, |t, v| t.mean(v[0]));
    check_op("mean_axis1", &[&[2, 3, 4]], 1e-4, |t, v| t.mean_axis1(v[0]));
    check_op("concat", &[&[2, 3, 2], &[2, 1, 2]], 1e-4, |t, v| t.concat(&[v[0], v[1]], 1));
    check_op("upsample2x", &[&[1, 2, 3, 2]], 1e-4, |t, v| t.nearest_upsample2x(v[0]));
    check_op("transpose", &[&[2, 3, 4]], 1e-4, |t, v| t.transpose_last_two(v[0]));
    check_op("reshape", &[&[2, 6]], 1e-4, |t, v| t.reshape(v[0], &[3, 4]));
    check_op("repeat_batch", &[&[3, 2]], 1e-4, |t, v| t.repeat_batch(v[0], 3));
    check_op("select_batch", &[&[3, 2]], 1e-4, |t, v| t.select_batch(v[0], 1));
}

#[test]
fn gradcheck_bilinear_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for instance in 0..10 {
        let img = random_tensor(&[2, 4, 5], -1.0, 1.0, &mut rng);
        // interior points away from pixel-center grid lines, where the
        // interpolant is smooth
        let mut coords = Vec::new();
        for _ in 0..6 {
            let u = rand::Rng::random_range(&mut rng, 0..4) as f64 + 0.6 + rand::Rng::random_range(&mut rng, 0.1..0.8);
            let v = rand::Rng::random_range(&mut rng, 0..3) as f64 + 0.6 + rand::Rng::random_range(&mut rng, 0.1..0.8);
            coords.extend([u, v]);
        }
        let coords = t(&[6, 2], &coords);
        let report = check_gradients(&[img, coords], 1e-4, |tape, v| {
            let out = tape.bilinear_sample(v[0], v[1])?;
            random_projection(tape, out, instance)
        })
        .unwrap();
        assert!(report.max_relative_error() <= 1e-4, "{:e}", report.max_relative_error());
    }
}

fn block_with<F: Real>(dim: usize, ffn: usize, seed: u64) -> (ParamStore<F>, AttentionBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = AttentionBlock::new(&mut store, "dec", dim, ffn, &mut rng);
    (store, block)
}

#[test]
fn attention_single_key_adds_feature() {
    let dim = 4;
    let (mut store, block) = block_with::<f64>(dim, 8, 1);
    let mut eye = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        eye.data_mut()[i * dim + i] = 1.0;
    }
    store.set(block.cross_attn.value_w, eye).unwrap();
    // silence the query self-attention and the FFN so the residual input is q
    store.set(block.self_attn.value_w, Tensor::zeros(&[dim, dim])).unwrap();
    store.set(block.ffn_out_w, Tensor::zeros(&[dim, 8])).unwrap();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let q = t(&[1, 3, dim], &[0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 2.0, 0.0, 0.7, 0.7, -0.7, 0.1]);
    let f = t(&[1, 1, dim], &[1.0, -2.0, 0.25, 3.0]);
    let qv = tape.constant(q.clone());
    let fv = tape.constant(f.clone());
    let out = block.forward(&mut tape, &p, qv, fv).unwrap();
    let out = tape.value(out).data();
    for (i, (&o, &qq)) in out.iter().zip(q.data()).enumerate() {
        let expect = qq + f.data()[i % dim];
        assert!((o - expect).abs() < 1e-12, "{i}: {o} vs {expect}");
    }
}

#[test]
fn attention_is_feature_permutation_invariant() {
    let (store, block) = block_with::<f64>(4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_tensor(&[1, 2, 4], -1.0, 1.0, &mut rng);
    let f = random_tensor(&[1, 3, 4], -1.0, 1.0, &mut rng);
    let perm = [2usize, 0, 1];
    let mut fp = f.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let row: Vec<f64> = f.data()[src * 4..src * 4 + 4].to_vec();
        fp.data_mut()[dst * 4..dst * 4 + 4].copy_from_slice(&row);
    }
    let run = |features: &Tensor<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let qv = tape.constant(q.clone());
        let fv = tape.constant(features.clone());
        let out = block.forward(&mut tape, &p, qv, fv).unwrap();
        tape.value(out).to_f64()
    };
    for (a, b) in run(&f).iter().zip(run(&fp)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_gradcheck() {
    let (store, block) = block_with::<f64>(4, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&[1, 2, 4], -1.0, 1.0, &mut rng);
    let f = random_tensor(&[1, 3, 4], -1.0, 1.0, &mut rng);
    let mut inputs = vec![q, f];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = check_gradients(&inputs, 1e-4, |tape, v| {
        let out = block_forward_with(&block, tape, v)?;
        random_projection(tape, out, 5)
    })
    .unwrap();
    assert!(report.max_relative_error() <= 1e-4, "{:e}", report.max_relative_error());
}

// Runs the block with externally supplied parameter vars (leaves 2..).
fn block_forward_with(block: &AttentionBlock, tape: &mut Tape<f64>, v: &[Var]) -> Result<Var, TensorError> {
    let bound = Bound::from_vars(v[2..].to_vec());
    block.forward(tape, &bound, v[0], v[1])
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[4, 4], -1.0, 1.0, &mut rng);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.constant(w.clone());
        let f = tape.matmul(xv, wv).unwrap();
        let f = tape.sigmoid(f).unwrap();
        let f = tape.sum(f).unwrap();
        let g = tape.softmax_last_dim(xv).unwrap();
        let g = tape.mul(g, xv).unwrap();
        let g = tape.sum(g).unwrap();
        let fa = tape.scalar_mul(f, a).unwrap();
        let gb = tape.scalar_mul(g, b).unwrap();
        let total = tape.add(fa, gb).unwrap();
        tape.backward(total).unwrap().get(xv).to_f64()
    };
    let (a, b) = (0.7, -1.3);
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    for i in 0..combined.len() {
        assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let (store, block) = block_with::<f32>(8, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Tensor<f32> = random_tensor(&[2, 3, 8], -1.0, 1.0, &mut rng).cast();
        let f: Tensor<f32> = random_tensor(&[2, 5, 8], -1.0, 1.0, &mut rng).cast();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let qv = tape.constant(q);
        let fv = tape.constant(f);
        let out = block.forward(&mut tape, &p, qv, fv).unwrap();
        let loss = tape.mean(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        (tape.value(out).clone(), p.gradients(&grads))
    };
    assert_eq!(run(), run());
}
