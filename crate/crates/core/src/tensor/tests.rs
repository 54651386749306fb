use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], requires_grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    if requires_grad {
        Tensor::parameter(shape, data).unwrap()
    } else {
        Tensor::new(shape, data).unwrap()
    }
}

/// Direct loop cross-correlation, written independently of the lowered
/// kernels.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (xd, wd) = (x.data(), w.data());
    let out: Vec<usize> = (0..3)
        .map(|i| (xs[i + 2] + 2 * pad[i] - ws[i + 2]) / stride[i] + 1)
        .collect();
    let mut y = Vec::new();
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = b[co];
                        for ci in 0..xs[1] {
                            for a in 0..ws[2] {
                                for bb in 0..ws[3] {
                                    for c in 0..ws[4] {
                                        let id = (od * stride[0] + a) as isize - pad[0] as isize;
                                        let ih = (oh * stride[1] + bb) as isize - pad[1] as isize;
                                        let iw = (ow * stride[2] + c) as isize - pad[2] as isize;
                                        if id < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                        if id >= xs[2] || ih >= xs[3] || iw >= xs[4] {
                                            continue;
                                        }
                                        let xi = (((n * xs[1] + ci) * xs[2] + id) * xs[3] + ih) * xs[4] + iw;
                                        let wi = (((co * ws[1] + ci) * ws[2] + a) * ws[3] + bb) * ws[4] + c;
                                        acc += xd[xi] * wd[wi];
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    (vec![xs[0], ws[0], out[0], out[1], out[2]], y)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 4, 5], false);
    let w = Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::new(&[1], vec![0.0]).unwrap();
    let y = conv3d(&x, &w, Some(&b), [1; 3], [0; 3]).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn constant_field_with_ones_kernel() {
    let x = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 1.5);
    let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
    let y = conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 12.0));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5, 5], false);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3], false);
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bt = Tensor::new(&[3], b.clone()).unwrap();
    for (stride, pad) in [([1; 3], [1; 3]), ([1; 3], [0; 3]), ([2, 1, 2], [1, 0, 2])] {
        let y = conv3d(&x, &w, Some(&bt), stride, pad).unwrap();
        let (shape, expect) = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(y.shape(), shape.as_slice());
        assert!(max_rel(&y.data(), &expect) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_oversized_kernel() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
    let w = Tensor::zeros(&[3, 1, 3, 3, 3]);
    let e = conv3d(&x, &w, None, [1; 3], [1; 3]).unwrap_err();
    assert!(e.to_string().contains("channels"), "{e}");
    let w = Tensor::zeros(&[3, 2, 5, 5, 5]);
    assert!(matches!(conv3d(&x, &w, None, [1; 3], [0; 3]), Err(Error::Dimension { .. })));
    let x4 = Tensor::<f64>::zeros(&[2, 4, 4, 4]);
    assert!(matches!(conv3d(&x4, &w, None, [1; 3], [0; 3]), Err(Error::Shape { .. })));
}

#[test]
fn transposed_conv_shape_and_identity() {
    let x = Tensor::<f64>::zeros(&[1, 4, 8, 8, 8]);
    let w = Tensor::zeros(&[4, 2, 2, 2, 2]);
    let y = conv3d_transposed(&x, &w, None, [2; 3]).unwrap();
    assert_eq!(y.shape(), &[1, 2, 16, 16, 16]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 2, 4], false);
    let w = Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let y = conv3d_transposed(&x, &w, None, [1; 3]).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geometries: [([usize; 3], [usize; 3], [usize; 3]); 4] = [
        ([6, 6, 6], [2, 2, 2], [2, 2, 2]),
        ([7, 5, 6], [3, 3, 3], [1, 1, 1]),
        ([7, 7, 5], [3, 3, 1], [2, 2, 1]),
        ([9, 4, 6], [1, 2, 2], [1, 2, 2]),
    ];
    for (ext, k, s) in geometries {
        let x = rand_tensor(&mut rng, &[2, 3, ext[0], ext[1], ext[2]], false);
        let w = rand_tensor(&mut rng, &[4, 3, k[0], k[1], k[2]], false);
        let y_shape = conv3d(&x, &w, None, s, [0; 3]).unwrap().shape().to_vec();
        let y = rand_tensor(&mut rng, &y_shape, false);
        let cx = conv3d(&x, &w, None, s, [0; 3]).unwrap();
        let ty = conv3d_transposed(&y, &w, None, s).unwrap();
        // the transposed output covers only the part of x the conv reads
        let ts = ty.shape().to_vec();
        let xc = crop_spatial(&x, [ts[2], ts[3], ts[4]]).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = xc.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-12) < 1e-5, "{lhs} vs {rhs}");
    }
}

fn pool_oracle(x: &Tensor<f64>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let d = x.data();
    let mut out = Vec::new();
    for p in 0..s[0] * s[1] {
        for z in 0..s[2] / k {
            for y in 0..s[3] / k {
                for xx in 0..s[4] / k {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..k {
                        for b in 0..k {
                            for c in 0..k {
                                let i = p * s[2] * s[3] * s[4] + ((z * k + a) * s[3] + y * k + b) * s[4] + xx * k + c;
                                m = m.max(d[i]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

#[test]
fn maxpool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 1, 8, 8, 8], false);
    let (y, _) = maxpool3d(&x, [2; 3], [2; 3]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    assert_eq!(y.to_vec(), pool_oracle(&x, 2));
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let x = Tensor::<f64>::parameter(&[1, 1, 2, 2, 4], vec![3.0; 16]).unwrap();
    let (y, argmax) = maxpool3d(&x, [2; 3], [2; 3]).unwrap();
    assert_eq!(argmax, vec![0, 2]);
    y.mean().backward().unwrap();
    let g = x.grad().unwrap();
    for (i, v) in g.iter().enumerate() {
        let expect = if i == 0 || i == 2 { 0.5 } else { 0.0 };
        assert_eq!(*v, expect, "index {i}");
    }
}

#[test]
fn maxpool_unique_max_gets_all_gradient() {
    let mut data = vec![0.0; 8];
    data[5] = 2.0;
    let x = Tensor::<f64>::parameter(&[1, 1, 2, 2, 2], data).unwrap();
    let (y, _) = maxpool3d(&x, [2; 3], [2; 3]).unwrap();
    y.mean().backward().unwrap();
    let g = x.grad().unwrap();
    assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_small_extent() {
    let x = Tensor::<f64>::zeros(&[1, 1, 1, 4, 4]);
    assert!(matches!(maxpool3d(&x, [2; 3], [2; 3]), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_definitions() {
    let x = Tensor::<f64>::new(&[2], vec![-3.0, 3.0]).unwrap();
    assert_eq!(x.relu().to_vec(), vec![0.0, 3.0]);
    assert_eq!(Tensor::<f64>::scalar(0.0).sigmoid().item().unwrap(), 0.5);
    assert_eq!(x.mul_scalar(2.0).to_vec(), vec![-6.0, 6.0]);
    assert_eq!(x.add(&x).unwrap().to_vec(), vec![-6.0, 6.0]);
    assert_eq!(x.mean().item().unwrap(), 0.0);
    let big = Tensor::<f32>::new(&[2], vec![-1000.0, 1000.0]).unwrap().sigmoid().to_vec();
    assert_eq!(big, vec![0.0, 1.0]);

    let a = Tensor::<f64>::zeros(&[1, 4, 2, 3, 2]);
    let b = Tensor::<f64>::zeros(&[1, 8, 2, 3, 2]);
    assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[1, 12, 2, 3, 2]);
    let c = Tensor::<f64>::zeros(&[1, 8, 2, 3, 3]);
    assert!(concat_channels(&a, &c).is_err());
    assert!(a.add(&b).is_err());
}

#[test]
fn concat_keeps_per_item_channel_order() {
    let a = Tensor::<f64>::new(&[2, 1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::<f64>::new(&[2, 1, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
}

#[test]
fn pad_then_crop_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 5, 2], false);
    let p = pad_spatial(&x, [4, 8, 4]).unwrap();
    assert_eq!(p.shape(), &[1, 2, 4, 8, 4]);
    let total: f64 = p.data().iter().sum();
    let orig: f64 = x.data().iter().sum();
    assert!((total - orig).abs() < 1e-12);
    assert_eq!(crop_spatial(&p, [3, 5, 2]).unwrap().to_vec(), x.to_vec());
    assert!(pad_spatial(&x, [2, 5, 2]).is_err());
}

#[test]
fn mean_gradient_is_uniform() {
    let x = Tensor::<f64>::parameter(&[2, 3], vec![1.0; 6]).unwrap();
    x.mean().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0 / 6.0; 6]);
}

#[test]
fn independent_loss_leaves_zero_gradient() {
    let x = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    y.mean().backward().unwrap();
    assert!(x.grad().unwrap_or_else(|| vec![0.0; 3]).iter().all(|&g| g == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::<f64>::parameter(&[3], vec![1.0; 3]).unwrap();
    assert!(matches!(x.relu().backward(), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_consumes_tape_and_populates_every_node() {
    let x = Tensor::<f64>::parameter(&[4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
    let h = x.relu();
    let loss = h.mul_scalar(2.0).mean();
    assert!(loss.has_grad_fn());
    loss.backward().unwrap();
    assert!(!loss.has_grad_fn() && !h.has_grad_fn());
    assert_eq!(h.grad().unwrap(), vec![0.5; 4]);
    assert_eq!(x.grad().unwrap(), vec![0.5, 0.0, 0.5, 0.0]);
}

#[test]
fn repeated_graphs_accumulate() {
    let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
    x.mul_scalar(3.0).mean().backward().unwrap();
    x.mul_scalar(3.0).mean().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    x.zero_grad();
    x.mul_scalar(3.0).mean().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.5, 1.5]);
}

#[test]
fn no_grad_skips_recording() {
    let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
    let y = {
        let _g = no_grad();
        x.relu()
    };
    assert!(!y.requires_grad());
    assert!(x.relu().requires_grad());
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[1, 3, 9, 10, 11], false).cast::<f32>();
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3, 3], false).cast::<f32>();
    let a = conv3d(&x, &w, None, [1; 3], [1; 3]).unwrap().to_vec();
    let b = conv3d(&x, &w, None, [1; 3], [1; 3]).unwrap().to_vec();
    assert_eq!(a, b);
}

/// Weighted sum with fixed random coefficients, so every output element
/// contributes a distinct gradient.
fn probe(y: &Tensor<f64>, coef: &Tensor<f64>) -> Tensor<f64> {
    weighted_sum(y, coef)
}

struct WeightedSum {
    input: Tensor<f64>,
    coef: Vec<f64>,
}

impl GradFn<f64> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.input.clone()]
    }
    fn backward(&self, _out: &Tensor<f64>, grad: &[f64]) {
        let g: Vec<f64> = self.coef.iter().map(|c| c * grad[0]).collect();
        self.input.accumulate_grad(&g);
    }
}

fn weighted_sum(y: &Tensor<f64>, coef: &Tensor<f64>) -> Tensor<f64> {
    let s = y.data().iter().zip(coef.data().iter()).map(|(a, b)| a * b).sum();
    Tensor::from_op(
        vec![1],
        vec![s],
        WeightedSum {
            input: y.clone(),
            coef: coef.to_vec(),
        },
    )
}

fn assert_gradcheck(wrt: &[Tensor<f64>], f: impl FnMut() -> Result<Tensor<f64>>, rng: &mut ChaCha8Rng) {
    let report = gradcheck::check(wrt, f, 1e-4, 64, rng).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4, 6], true);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3], true);
        let b = rand_tensor(&mut rng, &[3], true);
        let y_shape = conv3d(&x, &w, Some(&b), [1; 3], [1; 3]).unwrap().shape().to_vec();
        let coef = rand_tensor(&mut rng, &y_shape, false);
        assert_gradcheck(
            &[x.clone(), w.clone(), b.clone()],
            || Ok(probe(&conv3d(&x, &w, Some(&b), [1; 3], [1; 3])?, &coef)),
            &mut rng,
        );

        let ys = conv3d(&x, &w, Some(&b), [2, 1, 2], [0, 1, 1]).unwrap().shape().to_vec();
        let coef = rand_tensor(&mut rng, &ys, false);
        assert_gradcheck(
            &[x.clone(), w.clone(), b.clone()],
            || Ok(probe(&conv3d(&x, &w, Some(&b), [2, 1, 2], [0, 1, 1])?, &coef)),
            &mut rng,
        );

        let wt = rand_tensor(&mut rng, &[2, 3, 2, 2, 2], true);
        let bt = rand_tensor(&mut rng, &[3], true);
        let coef = rand_tensor(&mut rng, &[2, 3, 10, 8, 12], false);
        assert_gradcheck(
            &[x.clone(), wt.clone(), bt.clone()],
            || Ok(probe(&conv3d_transposed(&x, &wt, Some(&bt), [2; 3])?, &coef)),
            &mut rng,
        );

        let coef = rand_tensor(&mut rng, &[2, 2, 2, 2, 3], false);
        assert_gradcheck(&[x.clone()], || Ok(probe(&maxpool3d(&x, [2; 3], [2; 3])?.0, &coef)), &mut rng);

        let coef = rand_tensor(&mut rng, x.shape(), false);
        assert_gradcheck(&[x.clone()], || Ok(probe(&x.relu(), &coef)), &mut rng);
        assert_gradcheck(&[x.clone()], || Ok(probe(&x.sigmoid(), &coef)), &mut rng);
        assert_gradcheck(&[x.clone()], || Ok(probe(&x.mul_scalar(-1.7), &coef)), &mut rng);
        assert_gradcheck(&[x.clone()], || Ok(x.sigmoid().mean()), &mut rng);

        let x2 = rand_tensor(&mut rng, x.shape(), true);
        assert_gradcheck(&[x.clone(), x2.clone()], || Ok(probe(&x.add(&x2)?, &coef)), &mut rng);

        let x3 = rand_tensor(&mut rng, &[2, 3, 5, 4, 6], true);
        let coef = rand_tensor(&mut rng, &[2, 5, 5, 4, 6], false);
        assert_gradcheck(&[x.clone(), x3.clone()], || Ok(probe(&concat_channels(&x, &x3)?, &coef)), &mut rng);

        let coef = rand_tensor(&mut rng, &[2, 2, 8, 8, 8], false);
        assert_gradcheck(&[x.clone()], || Ok(probe(&pad_spatial(&x, [8; 3])?, &coef)), &mut rng);
        let coef = rand_tensor(&mut rng, &[2, 2, 3, 3, 3], false);
        assert_gradcheck(&[x.clone()], || Ok(probe(&crop_spatial(&x, [3; 3])?, &coef)), &mut rng);
    }
}
