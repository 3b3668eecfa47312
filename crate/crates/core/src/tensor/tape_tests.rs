use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| (rng.normal() * scale) as f32).collect()).unwrap()
}

/// Norm-wise relative error between the tape gradient and central finite
/// differences of `sum(weights * build(inputs))`, evaluated per input.
fn gradcheck(inputs: &[Tensor], h: f32, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<f64> {
    let objective = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let v = tape.value(out).clone();
        let s = match weights {
            Some(w) => v.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum(),
            None => 0.0,
        };
        (s, v)
    };
    let (_, out) = objective(inputs, None);
    let mut wrng = Rng::new(99);
    let weights = rand_tensor(&mut wrng, out.shape(), 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.leaf(weights.clone(), false);
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum_all(prod).unwrap();
    tape.backward(root).unwrap();

    let mut errs = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut num = 0.0f64;
        let mut den_a = 0.0f64;
        let mut den_n = 0.0f64;
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (objective(&plus, Some(&weights)).0 - objective(&minus, Some(&weights)).0)
                / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            num += (a - fd).powi(2);
            den_a += a * a;
            den_n += fd * fd;
        }
        errs.push(num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12));
    }
    errs
}

fn assert_grads(errs: &[f64], tol: f64) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= tol, "input {i}: relative error {e:e} > {tol:e}");
    }
}

#[test]
fn conv2d_hand_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let y = tape.conv2d(x, k, None, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    assert_eq!(out.at4(0, 0, 1, 1), 9.0);
    assert_eq!(out.at4(0, 0, 0, 0), 4.0);
    assert_eq!(out.at4(0, 0, 0, 1), 6.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = Rng::new(1);
    let input = rand_tensor(&mut rng, &[2, 1, 5, 4], 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv2d_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Shape { .. })));
    let k = tape.leaf(Tensor::zeros(&[1, 2, 7, 7]), false);
    assert!(tape.conv2d(x, k, None, 1, 1).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(2);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], 0.3);
    let b = rand_tensor(&mut rng, &[4], 0.3);
    let errs = gradcheck(&[x.clone(), w.clone(), b], 1e-3, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    assert_grads(&errs, 1e-3);
    let errs = gradcheck(&[x.clone(), w], 1e-3, |t, v| t.conv2d(v[0], v[1], None, 2, 1));
    assert_grads(&errs, 1e-3);
    let w1 = rand_tensor(&mut rng, &[2, 3, 1, 1], 0.5);
    let errs = gradcheck(&[x, w1], 1e-3, |t, v| t.conv2d(v[0], v[1], None, 1, 0));
    assert_grads(&errs, 1e-3);
}

#[test]
fn conv2d_gradient_mass_matches_in_bounds_kernel_sums() {
    let mut rng = Rng::new(3);
    let (h, w) = (6, 7);
    let kernel = rand_tensor(&mut rng, &[1, 1, 3, 3], 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 1, h, w], 1.0), true);
    let k = tape.leaf(kernel.clone(), false);
    let y = tape.conv2d(x, k, None, 1, 1).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let mass: f64 = tape.grad(x).unwrap().data().iter().map(|&v| v as f64).sum();

    let mut expected = 0.0f64;
    for oy in 0..h as isize {
        for ox in 0..w as isize {
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        expected += kernel.data()[(ky * 3 + kx) as usize] as f64;
                    }
                }
            }
        }
    }
    assert!((mass - expected).abs() < 1e-4, "{mass} vs {expected}");
}

#[test]
fn max_pool_values_and_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.leaf(Tensor::full(&[1, 2, 4, 6], 2.5), false);
    let y = tape.max_pool2(c).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 2, 2, 3], 2.5));

    let odd = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]), false);
    assert!(tape.max_pool2(odd).is_err());
}

#[test]
fn max_pool_gradient_one_per_window() {
    let mut rng = Rng::new(4);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 2, 4, 4], 1.0), true);
    let y = tape.max_pool2(x).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for c in 0..2 {
        for wy in 0..2 {
            for wx in 0..2 {
                let vals: Vec<f32> = (0..4).map(|i| g.at4(0, c, 2 * wy + i / 2, 2 * wx + i % 2)).collect();
                assert_eq!(vals.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(vals.iter().filter(|&&v| v == 0.0).count(), 3);
            }
        }
    }

    // Well-separated values so the argmax cannot flip under the perturbation.
    let mut perm: Vec<f32> = (0..32).map(|i| i as f32 * 0.1).collect();
    rng.shuffle(&mut perm);
    let xs = Tensor::new(vec![2, 1, 4, 4], perm).unwrap();
    assert_grads(&gradcheck(&[xs], 1e-3, |t, v| t.max_pool2(v[0])), 1e-3);
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true);
    let y = tape.max_pool2(x).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_hand_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(), false);
    let y = tape.bilinear_upsample(x, 2).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    for row in out.data().chunks(4) {
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
    }

    let one = tape.leaf(Tensor::full(&[1, 1, 1, 1], 3.5), false);
    let y = tape.bilinear_upsample(one, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 3.5));

    assert!(tape.bilinear_upsample(one, 3).is_err());
}

#[test]
fn upsample_gradients() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&mut rng, &[2, 2, 3, 4], 1.0);
    for f in [2, 4, 8] {
        assert_grads(&gradcheck(std::slice::from_ref(&x), 1e-3, |t, v| t.bilinear_upsample(v[0], f)), 1e-3);
    }
}

#[test]
fn upsample_gradient_mass_is_factor_squared() {
    let mut rng = Rng::new(6);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 1, 3, 5], 1.0), true);
    let y = tape.bilinear_upsample(x, 4).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let mass: f32 = tape.grad(x).unwrap().data().iter().sum();
    assert!((mass - 16.0 * 15.0).abs() < 1e-3);
}

#[test]
fn softmax_hand_values() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3f32.ln()), false);
    let b = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
    let s = tape.softmax_over(&[a, b]).unwrap();
    let v = tape.value(s);
    for p in 0..4 {
        assert!((v.data()[p] - 0.75).abs() < 1e-6);
        assert!((v.data()[4 + p] - 0.25).abs() < 1e-6);
    }

    let single = tape.softmax_over(&[a]).unwrap();
    assert!(tape.value(single).data().iter().all(|&w| w == 1.0));

    let maps: Vec<Var> = (0..6).map(|_| tape.leaf(Tensor::full(&[1, 1, 1, 1], 0.7), false)).collect();
    let s = tape.softmax_over(&maps).unwrap();
    assert!(tape.value(s).data().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-7));

    assert!(tape.softmax_over(&[]).is_err());
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in proptest::collection::vec(-8.0f32..8.0, 12),
        shift in proptest::collection::vec(-20.0f32..20.0, 3),
    ) {
        // K = 4 maps of 1x3 pixels.
        let mut tape = Tape::new();
        let maps: Vec<Var> = (0..4)
            .map(|k| tape.leaf(Tensor::new(vec![1, 1, 1, 3], logits[k * 3..k * 3 + 3].to_vec()).unwrap(), false))
            .collect();
        let shifted: Vec<Var> = (0..4)
            .map(|k| {
                let d = (0..3).map(|p| logits[k * 3 + p] + shift[p]).collect();
                tape.leaf(Tensor::new(vec![1, 1, 1, 3], d).unwrap(), false)
            })
            .collect();
        let s = tape.softmax_over(&maps).unwrap();
        let s2 = tape.softmax_over(&shifted).unwrap();
        let (a, b) = (tape.value(s).data().to_vec(), tape.value(s2).data().to_vec());
        for p in 0..3 {
            let total: f32 = (0..4).map(|k| a[k * 3 + p]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            for k in 0..4 {
                prop_assert!(a[k * 3 + p] >= 0.0);
                prop_assert!((a[k * 3 + p] - b[k * 3 + p]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = Rng::new(7);
    let a = rand_tensor(&mut rng, &[2, 1, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[2, 1, 3, 3], 1.0);
    let c = rand_tensor(&mut rng, &[2, 1, 3, 3], 1.0);
    assert_grads(&gradcheck(&[a, b, c], 1e-3, |t, v| t.softmax_over(v)), 1e-3);
}

#[test]
fn elementwise_gradients() {
    let mut rng = Rng::new(8);
    let a = rand_tensor(&mut rng, &[1, 2, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[1, 2, 3, 3], 1.0);
    assert_grads(&gradcheck(&[a.clone(), b.clone()], 1e-3, |t, v| t.add(v[0], v[1])), 1e-3);
    assert_grads(&gradcheck(&[a.clone(), b.clone()], 1e-3, |t, v| t.mul(v[0], v[1])), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.sigmoid(v[0])), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.scale(v[0], -1.7)), 1e-3);
    assert_grads(&gradcheck(&[a.clone(), b.clone()], 1e-3, |t, v| t.concat_channels(v)), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.sum_channels(v[0])), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.sum_all(v[0])), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.pick(v[0], 7)), 1e-3);
    assert_grads(&gradcheck(std::slice::from_ref(&a), 1e-3, |t, v| t.affine_channels(v[0], &[0.5, -2.0], &[1.0, 3.0])), 1e-3);

    // Keep values away from the ReLU kink.
    let away = Tensor::new(
        a.shape().to_vec(),
        a.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect(),
    )
    .unwrap();
    assert_grads(&gradcheck(&[away], 1e-3, |t, v| t.relu(v[0])), 1e-3);

    let probs = Tensor::new(vec![1, 1, 2, 3], vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.05]).unwrap();
    assert_grads(&gradcheck(&[probs], 1e-4, |t, v| t.logit(v[0], 1e-6)), 1e-3);
}

#[test]
fn batch_norm_gradients() {
    let mut rng = Rng::new(9);
    let x = rand_tensor(&mut rng, &[3, 2, 4, 4], 1.5);
    let gamma = rand_tensor(&mut rng, &[2], 1.0);
    let beta = rand_tensor(&mut rng, &[2], 1.0);
    let errs = gradcheck(&[x.clone(), gamma.clone(), beta.clone()], 1e-3, |t, v| {
        Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    });
    assert_grads(&errs, 1e-3);
    let errs = gradcheck(&[x, gamma, beta], 1e-3, |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[1.3, 0.6], 1e-5)
    });
    assert_grads(&errs, 1e-3);
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = Rng::new(10);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[4, 1, 3, 3], 2.0), false);
    let g = tape.leaf(Tensor::full(&[1], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let d = tape.value(y).data();
    let mean: f32 = d.iter().sum::<f32>() / d.len() as f32;
    let var: f32 = d.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d.len() as f32;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
    assert_eq!(stats.mean.len(), 1);
}

#[test]
fn balanced_bce_gradients() {
    let mut rng = Rng::new(11);
    // Small instance: the scalar loss is stored in f32, so per-pixel
    // gradients must be large relative to its rounding for the FD oracle.
    let logits = rand_tensor(&mut rng, &[2, 1, 2, 3], 1.5);
    let target: Vec<bool> = (0..12).map(|i| (i * 7) % 5 < 2).collect();
    let errs = gradcheck(&[logits], 1e-3, |t, v| t.balanced_bce_logits(v[0], &target, 1e-6));
    assert_grads(&errs, 1e-3);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn non_finite_results_surface_as_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3e38), true);
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let c = tape.leaf(Tensor::scalar(5.0), false);
    let y = tape.mul(x, c).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
}
