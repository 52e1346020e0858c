use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinodiff::denoiser::{
    dilated_attention, feed_forward, mhda_block, multi_head_attention, ssla_sublayer,
};
use sinodiff_autograd::{Graph, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn module_params(seed: u64, name: &str, dim: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for part in ["q", "k", "v", "o"] {
        store.insert(format!("{name}.{part}.w"), rand_tensor(&mut rng, &[dim, dim], 0.6));
        store.insert(format!("{name}.{part}.b"), rand_tensor(&mut rng, &[dim], 0.2));
    }
    store.insert(format!("{name}.ffn1.w"), rand_tensor(&mut rng, &[dim, 4 * dim], 0.4));
    store.insert(format!("{name}.ffn1.b"), rand_tensor(&mut rng, &[4 * dim], 0.1));
    store.insert(format!("{name}.ffn2.w"), rand_tensor(&mut rng, &[4 * dim, dim], 0.4));
    store.insert(format!("{name}.ffn2.b"), rand_tensor(&mut rng, &[dim], 0.1));
    store
}

/// `x W + b` on plain row-major data.
fn affine(x: &[f64], n: usize, store: &ParamStore, name: &str) -> Vec<f64> {
    let w = store.get(&format!("{name}.w")).unwrap();
    let b = store.get(&format!("{name}.b")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut acc = b.data()[j];
            for k in 0..din {
                acc += x[i * din + k] * w.data()[k * dout + j];
            }
            out[i * dout + j] = acc;
        }
    }
    out
}

/// Attention output of one query over an explicit key list, head by head,
/// followed by the output projection.
fn attend_oracle(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
    query: usize,
    keys: &[usize],
) -> Vec<f64> {
    let q = affine(x, n, store, &format!("{name}.q"));
    let k = affine(x, n, store, &format!("{name}.k"));
    let v = affine(x, n, store, &format!("{name}.v"));
    let dh = dim / heads;
    let mut concat = vec![0.0; dim];
    for h in 0..heads {
        let mut logits = Vec::new();
        for &key in keys {
            let mut s = 0.0;
            for d in h * dh..(h + 1) * dh {
                s += q[query * dim + d] * k[key * dim + d];
            }
            logits.push(s / (dh as f64).sqrt());
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, &key) in e.iter().zip(keys) {
            for d in h * dh..(h + 1) * dh {
                concat[d] += a / z * v[key * dim + d];
            }
        }
    }
    affine(&concat, 1, store, &format!("{name}.o"))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn mhsa_matches_pairwise_loop() {
    let (n, dim, heads) = (6, 8, 2);
    let store = module_params(1, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[n, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = multi_head_attention(&mut g, &store, "a", xv, heads, None).unwrap();
    let all: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let oracle = attend_oracle(&store, "a", x.data(), n, dim, heads, i, &all);
        let got = &g.value(out).data()[i * dim..(i + 1) * dim];
        assert!(max_diff(got, &oracle) < 1e-6);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let dim = 8;
    let store = module_params(3, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut weights = Vec::new();
    let out = multi_head_attention(&mut g, &store, "a", xv, 2, Some(&mut weights)).unwrap();
    for w in &weights {
        assert_eq!(g.value(*w).data(), &[1.0]);
    }
    let v = affine(x.data(), 1, &store, "a.v");
    let expected = affine(&v, 1, &store, "a.o");
    assert!(max_diff(g.value(out).data(), &expected) < 1e-12);

    // the same holds for a 1x1 grid under local attention
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = dilated_attention(&mut g, &store, "a", xv, (1, 1), 2, 3, &[1], None).unwrap();
    assert!(max_diff(g.value(out).data(), &expected) < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let (h, w, dim) = (5, 6, 12);
    let store = module_params(5, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[h * w, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x);
    let mut weights = Vec::new();
    multi_head_attention(&mut g, &store, "a", xv, 3, Some(&mut weights)).unwrap();
    dilated_attention(&mut g, &store, "a", xv, (h, w), 3, 3, &[1, 2, 3], Some(&mut weights)).unwrap();
    assert_eq!(weights.len(), 6);
    for wv in weights {
        let t = g.value(wv);
        let cols = t.shape()[1];
        for row in t.data().chunks(cols) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn full_window_centre_matches_dense_attention() {
    let (h, w, dim, heads) = (5, 5, 8, 2);
    let store = module_params(7, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[h * w, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = dilated_attention(&mut g, &store, "a", xv, (h, w), heads, 5, &[1], None).unwrap();
    let all: Vec<usize> = (0..h * w).collect();
    let oracle = attend_oracle(&store, "a", x.data(), h * w, dim, heads, 12, &all);
    assert!(max_diff(&g.value(out).data()[12 * dim..13 * dim], &oracle) < 1e-6);
}

#[test]
fn wide_window_reduces_to_global_attention() {
    let (h, w, dim, heads) = (3, 4, 8, 2);
    let store = module_params(9, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[h * w, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x);
    let window = 2 * h.max(w) - 1;
    let local = dilated_attention(&mut g, &store, "a", xv, (h, w), heads, window, &[1], None).unwrap();
    let global = multi_head_attention(&mut g, &store, "a", xv, heads, None).unwrap();
    assert!(max_diff(g.value(local).data(), g.value(global).data()) < 1e-6);
}

/// Positions whose perturbation changes the pre-feed-forward output at
/// `(m, n)`, found by perturbing each token in turn.
fn influence(
    store: &ParamStore,
    x: &Tensor,
    grid: (usize, usize),
    heads: usize,
    rates: &[usize],
    at: (usize, usize),
) -> Vec<(usize, usize)> {
    let dim = x.shape()[1];
    let eval = |input: &Tensor| {
        let mut g = Graph::new();
        let xv = g.input(input.clone());
        let out = ssla_sublayer(&mut g, store, "a", xv, grid, None, heads, 3, rates).unwrap();
        let p = at.0 * grid.1 + at.1;
        g.value(out).data()[p * dim..(p + 1) * dim].to_vec()
    };
    let base = eval(x);
    let mut hits = Vec::new();
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let mut y = x.clone();
            let p = r * grid.1 + c;
            for d in 0..dim {
                y.data_mut()[p * dim + d] += 0.7 + 0.1 * d as f64;
            }
            if eval(&y) != base {
                hits.push((r, c));
            }
        }
    }
    hits
}

#[test]
fn dilation_two_sees_exactly_its_stencil() {
    let dim = 8;
    let store = module_params(11, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[25, dim], 1.0);
    let hits = influence(&store, &x, (5, 5), 2, &[2], (2, 2));
    let expected: Vec<(usize, usize)> = [0, 2, 4]
        .iter()
        .flat_map(|&r| [0, 2, 4].iter().map(move |&c| (r, c)))
        .collect();
    assert_eq!(hits, expected);
}

#[test]
fn receptive_field_extents() {
    let dim = 6;
    let store = module_params(13, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[81, dim], 1.0);
    for rate in 1..=3usize {
        let hits = influence(&store, &x, (9, 9), 3, &[rate], (4, 4));
        assert_eq!(hits.len(), 9);
        let rows: Vec<usize> = hits.iter().map(|h| h.0).collect();
        let span = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
        assert_eq!(span, 2 * rate + 1, "rate {rate}");
        for &(r, c) in &hits {
            assert_eq!((r as isize - 4).rem_euclid(rate as isize), 0);
            assert_eq!((c as isize - 4).rem_euclid(rate as isize), 0);
        }
    }
    // union over the three partitions spans 7x7, nothing at distance 4
    let hits = influence(&store, &x, (9, 9), 3, &[1, 2, 3], (4, 4));
    assert!(hits.iter().all(|&(r, c)| (r as isize - 4).abs().max((c as isize - 4).abs()) <= 3));
    assert!(hits.contains(&(1, 1)) && hits.contains(&(7, 7)));
}

#[test]
fn single_rate_mhda_is_ssla_plus_feed_forward() {
    let dim = 12;
    let store = module_params(15, "a", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[20, dim], 1.0);
    let mut g = Graph::new();
    let xv = g.input(x);
    let block = mhda_block(&mut g, &store, "a", xv, (4, 5), None, 3, 3, &[2]).unwrap();
    let s = ssla_sublayer(&mut g, &store, "a", xv, (4, 5), None, 3, 3, &[2]).unwrap();
    let manual = feed_forward(&mut g, &store, "a", s).unwrap();
    assert_eq!(g.value(block), g.value(manual));
    assert_eq!(g.value(block).shape(), &[20, dim]);
}

#[test]
fn configuration_errors() {
    let dim = 8;
    let store = module_params(17, "a", dim);
    let mut g = Graph::new();
    let xv = g.input(Tensor::zeros(&[9, dim]));
    // 4 heads over 3 rates
    assert!(matches!(
        dilated_attention(&mut g, &store, "a", xv, (3, 3), 4, 3, &[1, 2, 3], None),
        Err(sinodiff::Error::Validation { .. })
    ));
    assert!(matches!(
        dilated_attention(&mut g, &store, "a", xv, (3, 3), 2, 4, &[1], None),
        Err(sinodiff::Error::Domain { .. })
    ));
    assert!(matches!(
        multi_head_attention(&mut g, &store, "a", xv, 3, None),
        Err(sinodiff::Error::Validation { .. })
    ));
}
