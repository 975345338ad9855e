use super::*;
use crate::error::Result;
use crate::rng::{normal_tensor, rng_from, EngineRng};

/// Contracts a primitive's output against a fixed random tensor so every
/// output coordinate contributes a distinct weight to the scalar loss.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, rng: &mut EngineRng) -> Result<Var> {
    let w = normal_tensor::<f64>(rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compares tape gradients of every input against central differences.
fn check_grads(seed: u64, shapes: &[&[usize]], build: &Build) -> f64 {
    let mut rng = rng_from(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal_tensor(&mut rng, s)).collect();
    let loss_seed = seed.wrapping_mul(31).wrapping_add(7);

    let eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted_loss(&mut tape, out, &mut rng_from(loss_seed))?;
        let value = tape.value(loss).item()?;
        let mut grads = Vec::new();
        if grad {
            tape.backward(loss)?;
            grads = vars.iter().map(|v| tape.grad(*v).unwrap().clone()).collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(&inputs, true).unwrap();
    let mut worst: f64 = 0.0;
    for (i, base) in inputs.iter().enumerate() {
        let fd = finite_difference_gradient(
            |x| {
                let mut vals = inputs.clone();
                vals[i] = x.clone();
                Ok(eval(&vals, false)?.0)
            },
            base,
            1e-5,
        )
        .unwrap();
        let err = relative_error(analytic[i].data(), fd.data(), 1e-6);
        worst = worst.max(err);
    }
    worst
}

fn assert_primitive(name: &str, shapes: &[&[usize]], build: &Build) {
    for seed in 0..50 {
        let err = check_grads(seed, shapes, build);
        assert!(err < 1e-4, "{name}: seed {seed} relative error {err:.3e}");
    }
}

#[test]
fn add_sub_mul_scale_gradients() {
    assert_primitive("add", &[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]));
    assert_primitive("sub", &[&[4], &[4]], &|t, v| t.sub(v[0], v[1]));
    assert_primitive("mul", &[&[3, 2], &[3, 2]], &|t, v| t.mul(v[0], v[1]));
    assert_primitive("scale", &[&[5]], &|t, v| Ok(t.scale(v[0], -1.7)));
    assert_primitive("scale_leading", &[&[3, 2, 2]], &|t, v| {
        t.scale_leading(v[0], &[0.5, -2.0, 3.0])
    });
}

#[test]
fn matmul_and_transpose_gradients() {
    assert_primitive("matmul", &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]));
    assert_primitive("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], &|t, v| {
        t.matmul(v[0], v[1])
    });
    assert_primitive("transpose", &[&[2, 3, 4]], &|t, v| t.transpose(v[0]));
}

#[test]
fn linear_gradients() {
    assert_primitive("linear", &[&[2, 3, 4], &[4, 5], &[5]], &|t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    });
    assert_primitive("linear no bias", &[&[3, 4], &[4, 2]], &|t, v| t.linear(v[0], v[1], None));
}

#[test]
fn conv2d_gradients() {
    assert_primitive("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    assert_primitive("conv2d strided", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], &|t, v| {
        t.conv2d(v[0], v[1], None, 2, 1)
    });
}

#[test]
fn nonlinear_gradients() {
    assert_primitive("silu", &[&[7]], &|t, v| Ok(t.silu(v[0])));
    assert_primitive("softmax", &[&[3, 5]], &|t, v| t.softmax_lastdim(v[0]));
    assert_primitive("group_norm_lite", &[&[2, 3, 3, 3], &[3], &[3]], &|t, v| {
        t.group_norm_lite(v[0], v[1], v[2])
    });
}

#[test]
fn structural_gradients() {
    assert_primitive("concat_channels", &[&[2, 1, 2, 2], &[2, 3, 2, 2]], &|t, v| {
        t.concat_channels(&[v[0], v[1]])
    });
    assert_primitive("reshape", &[&[2, 6]], &|t, v| t.reshape(v[0], &[3, 4]));
    assert_primitive("slice", &[&[2, 5, 3]], &|t, v| t.slice(v[0], 1, 1, 4));
    assert_primitive("sum", &[&[3, 3]], &|t, v| Ok(t.sum(v[0])));
    assert_primitive("mean", &[&[3, 3]], &|t, v| Ok(t.mean(v[0])));
    assert_primitive("upsample2x", &[&[1, 2, 3, 2]], &|t, v| t.upsample2x(v[0]));
    assert_primitive("add_channel_bias", &[&[2, 3, 2, 2], &[2, 3]], &|t, v| {
        t.add_channel_bias(v[0], v[1])
    });
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    assert_primitive("mask_fill", &[&[3, 4]], &move |t, v| {
        let filled = t.mask_fill(v[0], &mask, -1e9)?;
        t.softmax_lastdim(filled)
    });
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[2]));
    let y = t.softmax_lastdim(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_are_distributions() {
    for seed in 0..20 {
        let mut rng = rng_from(seed);
        let mut t = Tape::<f64>::new();
        let x = t.constant(normal_tensor::<f64>(&mut rng, &[6, 9]).scale(10.0));
        let y = t.softmax_lastdim(x).unwrap();
        for row in t.value(y).data().chunks(9) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_matmul() {
    let mut rng = rng_from(11);
    let a = normal_tensor::<f64>(&mut rng, &[3, 3]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut t = Tape::new();
    let (e, av) = (t.constant(eye), t.constant(a.clone()));
    let out = t.matmul(e, av).unwrap();
    assert_eq!(t.value(out), &a);
}

#[test]
fn conv_all_ones_center_is_nine() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 1, 4, 4]));
    let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, k, None, 1, 1).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    assert_eq!(out.data()[5], 9.0);
    assert_eq!(out.data()[0], 4.0);
    assert_eq!(out.data()[1], 6.0);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = t.constant(Tensor::zeros(&[3]));
    let err = t.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
    t.zero_grads();
    assert!(t.grad(x).is_none());
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(&[4], &[0.3, -1.0, 2.0, 0.0]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert!(t.grad(x).unwrap().max_abs() < 1e-15);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(&[3]));
    let y = t.scale(x, 2.0);
    assert!(t.backward(y).is_err());
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut t = Tape::<f64>::new();
    let used = t.param(Tensor::ones(&[2]));
    let unused = t.param(Tensor::ones(&[3]));
    let loss = t.sum(used);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(unused).unwrap().data(), &[0.0; 3]);
}

/// Three stacked layers with random weights: conv → norm → silu →
/// flatten → linear → softmax weighting.
#[test]
fn toy_network_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_grads(
            seed,
            &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3], &[3], &[3], &[48, 5], &[5]],
            &|t, v| {
                let h = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let h = t.group_norm_lite(h, v[3], v[4])?;
                let h = t.silu(h);
                let h = t.reshape(h, &[2, 48])?;
                let h = t.linear(h, v[5], Some(v[6]))?;
                t.softmax_lastdim(h)
            },
        );
        assert!(err < 1e-4, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = rng_from(99);
        let mut t = Tape::<f32>::new();
        let x = t.constant(normal_tensor(&mut rng, &[2, 3, 8, 8]));
        let w = t.constant(normal_tensor(&mut rng, &[4, 3, 3, 3]));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        let y = t.silu(y);
        t.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}
