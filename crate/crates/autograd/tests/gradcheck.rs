//! Central finite-difference checks for every differentiable op, plus the
//! value-level contracts of the op set.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinodiff_autograd::{Error, Graph, Result, Tensor, Var};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (relu, abs) are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss `sum(w * f(inputs))` for a fixed random `w`.
fn eval<F>(f: &F, inputs: &[Tensor], weights: &Tensor) -> (Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let w = g.input(weights.clone().reshape(g.shape(out)).unwrap());
    let m = g.mul(out, w).unwrap();
    let loss = g.sum(m).unwrap();
    (g, vars, loss)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Worst relative error between analytic and central-difference gradients
/// over all inputs.
fn gradcheck<F>(f: F, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = random(rng, &probe);
    let (g, vars, loss) = eval(&f, &inputs, &weights);
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let (gp, _, lp) = eval(&f, &plus, &weights);
            let (gm, _, lm) = eval(&f, &minus, &weights);
            numeric[i] = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn check_many<F, I>(name: &str, instances: usize, make_inputs: I, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    I: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inputs = make_inputs(&mut rng);
        worst = worst.max(gradcheck(&f, inputs, &mut rng));
    }
    assert!(worst < TOL, "{name}: relative gradient error {worst:e}");
}

#[test]
fn square_derivative_at_three() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn sum_of_matrix_product_matches_differences() {
    check_many(
        "sum_matmul",
        100,
        |r| vec![random(r, &[3, 4]), random(r, &[4, 2])],
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            g.sum(p)
        },
    );
}

#[test]
fn softmax_weighted_sum_l2_on_five_tokens() {
    // logits [5,5] -> attention weights -> weighted values [5,3] -> L2 to target
    check_many(
        "attention_toy",
        100,
        |r| vec![random(r, &[5, 5]), random(r, &[5, 3]), random(r, &[5, 3])],
        |g, v| {
            let w = g.softmax(v[0])?;
            let y = g.matmul(w, v[1])?;
            let d = g.sub(y, v[2])?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        },
    );
}

#[test]
fn elementwise_ops() {
    check_many("add", 100, |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |g, v| g.add(v[0], v[1]));
    check_many("sub", 100, |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |g, v| g.sub(v[0], v[1]));
    check_many("mul", 100, |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |g, v| g.mul(v[0], v[1]));
    check_many("scale", 100, |r| vec![random(r, &[6])], |g, v| g.scale(v[0], -1.7));
    check_many("gelu", 100, |r| vec![random(r, &[2, 5])], |g, v| g.gelu(v[0]));
    check_many("relu", 100, |r| vec![away_from_zero(r, &[2, 5])], |g, v| g.relu(v[0]));
    check_many("abs", 100, |r| vec![away_from_zero(r, &[2, 5])], |g, v| g.abs(v[0]));
}

#[test]
fn broadcast_ops() {
    check_many("add_row", 100, |r| vec![random(r, &[3, 4]), random(r, &[4])], |g, v| g.add_row(v[0], v[1]));
    check_many("mul_row", 100, |r| vec![random(r, &[3, 4]), random(r, &[4])], |g, v| g.mul_row(v[0], v[1]));
    check_many(
        "add_channel",
        100,
        |r| vec![random(r, &[3, 2, 2]), random(r, &[3])],
        |g, v| g.add_channel(v[0], v[1]),
    );
}

#[test]
fn matrix_products() {
    check_many("matmul", 100, |r| vec![random(r, &[3, 5]), random(r, &[5, 2])], |g, v| g.matmul(v[0], v[1]));
    check_many(
        "matmul_nt",
        100,
        |r| vec![random(r, &[3, 5]), random(r, &[2, 5])],
        |g, v| g.matmul_ex(v[0], v[1], true),
    );
    check_many(
        "linear",
        100,
        |r| vec![random(r, &[3, 5]), random(r, &[5, 2]), random(r, &[2])],
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    check_many(
        "bmm",
        100,
        |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])],
        |g, v| g.matmul(v[0], v[1]),
    );
    check_many(
        "bmm_nt",
        100,
        |r| vec![random(r, &[2, 1, 4]), random(r, &[2, 3, 4])],
        |g, v| g.matmul_ex(v[0], v[1], true),
    );
}

#[test]
fn normalisations() {
    check_many("softmax", 100, |r| vec![random(r, &[3, 5])], |g, v| g.softmax(v[0]));
    let mask = [true, false, true, true, false, true, true, true, false, true];
    check_many("masked_softmax", 100, |r| vec![random(r, &[2, 5])], move |g, v| {
        g.masked_softmax(v[0], Some(&mask))
    });
    check_many("layer_norm", 100, |r| vec![random(r, &[3, 6])], |g, v| g.layer_norm(v[0], 1e-5));
}

#[test]
fn structural_ops() {
    check_many(
        "concat_axis0",
        100,
        |r| vec![random(r, &[2, 3]), random(r, &[1, 3]), random(r, &[3, 3])],
        |g, v| g.concat(v, 0),
    );
    check_many(
        "concat_axis1",
        100,
        |r| vec![random(r, &[2, 3]), random(r, &[2, 1])],
        |g, v| g.concat(v, 1),
    );
    check_many("narrow", 100, |r| vec![random(r, &[3, 6])], |g, v| g.narrow(v[0], 1, 2, 3));
    check_many("permute", 100, |r| vec![random(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_many("transpose", 100, |r| vec![random(r, &[3, 4])], |g, v| g.transpose(v[0]));
    check_many("reshape", 100, |r| vec![random(r, &[3, 4])], |g, v| g.reshape(v[0], &[2, 6]));
    check_many("unfold", 100, |r| vec![random(r, &[4, 3, 2])], |g, v| Ok(g.unfold(v[0], 3, 2)?.0));
    let index = [Some(4), None, Some(0), Some(4), Some(11), Some(7)];
    check_many("gather", 100, |r| vec![random(r, &[3, 4])], move |g, v| g.gather(v[0], &index, vec![2, 3]));
    check_many("sum", 100, |r| vec![random(r, &[3, 4])], |g, v| g.sum(v[0]));
    check_many("mean", 100, |r| vec![random(r, &[3, 4])], |g, v| g.mean(v[0]));
}

#[test]
fn spatial_ops() {
    check_many(
        "conv2d",
        100,
        |r| vec![random(r, &[2, 4, 5]), random(r, &[3, 2, 3, 3])],
        |g, v| g.conv2d(v[0], v[1]),
    );
    check_many("avg_pool2", 100, |r| vec![random(r, &[2, 4, 4])], |g, v| g.avg_pool2(v[0]));
    check_many("upsample2", 100, |r| vec![random(r, &[2, 2, 3])], |g, v| g.upsample2(v[0]));
}

#[test]
fn concat_backward_routes_slices_to_parents() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.leaf(Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap());
    let c = g.concat(&[a, b], 1).unwrap();
    let w = g.input(Tensor::new(vec![1, 5], vec![10.0, 20.0, 30.0, 40.0, 50.0]).unwrap());
    let m = g.mul(c, w).unwrap();
    let loss = g.sum(m).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[10.0, 20.0]);
    assert_eq!(grads.get(b).unwrap(), &[30.0, 40.0, 50.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.0f64..200.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, &[rows, cols]));
        let big = g.scale(x, scale).unwrap();
        let s = g.softmax(big).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn singleton_softmax_is_one() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![3, 1], vec![-4.0, 0.0, 9.0]).unwrap());
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn masked_entries_get_zero_weight() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap());
    let s = g.masked_softmax(x, Some(&[false, true, true])).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 0.5, 0.5]);
}

#[test]
fn delta_kernel_convolution_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random(&mut rng, &[3, 5, 6]);
    let mut kernel = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        kernel.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(kernel);
    let y = g.conv2d(x, w).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = random(&mut rng, &[2, 4, 4]);
    let kernel = random(&mut rng, &[1, 2, 3, 3]);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(kernel.clone());
    let y = g.conv2d(x, w).unwrap();
    let at = |c: usize, i: isize, j: isize| {
        if (0..4).contains(&i) && (0..4).contains(&j) {
            input.data()[c * 16 + i as usize * 4 + j as usize]
        } else {
            0.0
        }
    };
    for i in 0..4isize {
        for j in 0..4isize {
            let mut s = 0.0;
            for c in 0..2 {
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        s += kernel.data()[(c * 3 + ky as usize) * 3 + kx as usize] * at(c, i + ky - 1, j + kx - 1);
                    }
                }
            }
            assert!((g.value(y).data()[(i * 4 + j) as usize] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn unfold_then_centre_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(k, r) in &[(1, 1), (3, 1), (3, 2), (5, 3)] {
        let input = random(&mut rng, &[4, 5, 3]);
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let (nb, _) = g.unfold(x, k, r).unwrap();
        let centre = g.narrow(nb, 1, (k * k) / 2, 1).unwrap();
        let back = g.reshape(centre, &[4, 5, 3]).unwrap();
        assert_eq!(g.value(back), &input);
    }
}

#[test]
fn unfold_even_window_is_a_domain_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 3, 1]));
    assert!(matches!(g.unfold(x, 4, 1), Err(Error::Domain { .. })));
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
    let y = g.layer_norm(x, 0.0).unwrap();
    for row in g.value(y).data().chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_known_product_and_shape_errors() {
    let mut g = Graph::new();
    let a = g.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.input(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    assert!(matches!(g.matmul(b, b), Err(Error::Shape { .. })));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unused_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let unused = g.leaf(Tensor::scalar(5.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
}

#[test]
fn non_finite_values_are_caught() {
    let mut g = Graph::new();
    g.set_check_finite(true);
    let x = g.input(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}
