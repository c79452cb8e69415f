//! Central finite-difference checks for every layer kind.

use d2t_nn::{Activation, Layer, LayerSpec, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: usize = 20;

/// |a - n| / max(|a|, |n|, 1e-2): relative where the gradient is material,
/// absolute below that, where central differences lose relative precision.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

enum Input {
    Values(Vec<usize>),
    Ids(usize, usize),
}

/// Checks d(Σ w∘layer(x))/d(params, x) against central differences.
fn check(spec: LayerSpec, input: Input, rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let layer = Layer::new(spec, "l", &mut store, rng).unwrap();
    // move parameters off their structured init so gains/biases are exercised
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (shape, x0, differentiable_input) = match input {
        Input::Values(shape) => {
            let n = shape.iter().product();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            (shape, x, true)
        }
        Input::Ids(len, vocab) => {
            let x: Vec<f64> = (0..len)
                .map(|_| rng.random_range(0..vocab) as f64)
                .collect();
            (vec![len], x, false)
        }
    };

    let eval = |store: &ParamStore, x: &[f64], weights: Option<&[f64]>| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(shape.clone(), x.to_vec()).unwrap();
        let y = layer.forward(&mut t, store, xv).unwrap();
        let out = t.value(y).to_vec();
        let s = weights.map_or(0.0, |w| out.iter().zip(w).map(|(a, b)| a * b).sum());
        (s, out)
    };

    let (_, y0) = eval(&store, &x0, None);
    let w: Vec<f64> = (0..y0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut t = Tape::new();
    let xv = t.constant(shape.clone(), x0.clone()).unwrap();
    let y = layer.forward(&mut t, &store, xv).unwrap();
    let grads = t.backward(y, Some(&w)).unwrap();
    let mut worst: f64 = 0.0;

    if differentiable_input {
        let gx = grads.wrt(xv).unwrap().to_vec();
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += H;
            let mut xm = x0.clone();
            xm[i] -= H;
            let num = (eval(&store, &xp, Some(&w)).0 - eval(&store, &xm, Some(&w)).0) / (2.0 * H);
            worst = worst.max(rel_err(gx[i], num));
        }
    }

    let analytic: Vec<(d2t_nn::ParamId, Vec<f64>)> =
        grads.params().map(|(id, g)| (id, g.to_vec())).collect();
    assert_eq!(analytic.len(), layer.params().len());
    for (id, g) in analytic {
        for i in 0..g.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let fp = eval(&store, &x0, Some(&w)).0;
            store.get_mut(id).data_mut()[i] = orig - H;
            let fm = eval(&store, &x0, Some(&w)).0;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * H)));
        }
    }
    worst
}

fn run_kind(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (LayerSpec, Input)) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (spec, input) = make(&mut rng);
        worst = worst.max(check(spec, input, &mut rng));
    }
    println!("{name}: max relative error {worst:.2e}");
    assert!(worst < TOL, "{name}: {worst:e}");
}

#[test]
fn dense() {
    run_kind("dense", |r| {
        let (i, o, rows) = (
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..4),
        );
        (
            LayerSpec::Dense {
                input: i,
                output: o,
            },
            Input::Values(vec![rows, i]),
        )
    });
}

#[test]
fn layer_norm() {
    run_kind("layer-norm", |r| {
        let (w, rows) = (r.random_range(2..6), r.random_range(1..4));
        (
            LayerSpec::LayerNorm { width: w },
            Input::Values(vec![rows, w]),
        )
    });
}

#[test]
fn group_norm() {
    run_kind("group-norm", |r| {
        let groups = r.random_range(1..3);
        let ch = groups * r.random_range(1..3);
        let (b, l) = (r.random_range(1..3), r.random_range(2..5));
        (
            LayerSpec::GroupNorm {
                channels: ch,
                groups,
            },
            Input::Values(vec![b, l, ch]),
        )
    });
}

#[test]
fn causal_self_attention() {
    run_kind("causal-self-attention", |r| {
        let heads = r.random_range(1..3);
        let width = heads * r.random_range(1..3);
        let (b, s) = (r.random_range(1..3), r.random_range(1..5));
        (
            LayerSpec::CausalSelfAttention { width, heads },
            Input::Values(vec![b, s, width]),
        )
    });
}

#[test]
fn conv1d() {
    run_kind("conv1d", |r| {
        let kernel = [1, 3, 5][r.random_range(0..3)];
        let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
        let (b, l) = (r.random_range(1..3), r.random_range(1..6));
        (
            LayerSpec::Conv1d {
                in_channels: ci,
                out_channels: co,
                kernel,
            },
            Input::Values(vec![b, l, ci]),
        )
    });
}

#[test]
fn embedding() {
    run_kind("embedding", |r| {
        let (v, w, n) = (
            r.random_range(1..6),
            r.random_range(1..4),
            r.random_range(1..6),
        );
        (
            LayerSpec::Embedding { vocab: v, width: w },
            Input::Ids(n, v),
        )
    });
}

#[test]
fn activations() {
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Silu,
        Activation::Gelu,
        Activation::Tanh,
    ] {
        run_kind(&format!("activation-{act:?}"), |r| {
            let n = r.random_range(1..8);
            (LayerSpec::Activation(act), Input::Values(vec![n]))
        });
    }
}
