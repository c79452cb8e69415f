use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "silu" => Activation::Silu,
            "gelu" => Activation::Gelu,
            "tanh" => Activation::Tanh,
            _ => return None,
        })
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Shape-level description of a layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    LayerNorm {
        width: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    CausalSelfAttention {
        width: usize,
        heads: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Embedding {
        vocab: usize,
        width: usize,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |reason: &str| {
            Err(NnError::InvalidSpec {
                layer: name.to_string(),
                reason: reason.to_string(),
            })
        };
        match *self {
            LayerSpec::Dense { input, output } if input == 0 || output == 0 => bad("zero width"),
            LayerSpec::LayerNorm { width: 0 } => bad("zero width"),
            LayerSpec::GroupNorm { channels, groups } if groups == 0 || channels % groups != 0 => {
                bad("group count must divide channel count")
            }
            LayerSpec::CausalSelfAttention { width, heads } if heads == 0 || width % heads != 0 => {
                bad("head count must divide model width")
            }
            LayerSpec::Conv1d { kernel, .. } if kernel % 2 == 0 => {
                bad("kernel size must be odd for same padding")
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                ..
            } if in_channels == 0 || out_channels == 0 => bad("zero channels"),
            LayerSpec::Embedding { vocab, width } if vocab == 0 || width == 0 => bad("empty table"),
            _ => Ok(()),
        }
    }
}

/// A layer instance: spec plus the ids of its parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub name: String,
    params: Vec<ParamId>,
}

fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl Layer {
    /// Allocates and initializes parameters under `name.*`.
    ///
    /// Dense and conv weights are uniform in ±1/√fan_in with zero bias, norm
    /// gains start at 1, embeddings are drawn from N(0, 0.02²).
    pub fn new<R: Rng + ?Sized>(
        spec: LayerSpec,
        name: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(name)?;
        let mut params = Vec::new();
        let mut add = |suffix: &str, t: Tensor, store: &mut ParamStore| -> Result<()> {
            params.push(store.add(format!("{name}.{suffix}"), t)?);
            Ok(())
        };
        match spec {
            LayerSpec::Dense { input, output } => {
                let bound = 1.0 / (input as f64).sqrt();
                add(
                    "weight",
                    uniform_tensor(vec![input, output], bound, rng),
                    store,
                )?;
                add("bias", Tensor::zeros(vec![output]), store)?;
            }
            LayerSpec::LayerNorm { width } => {
                add("gain", Tensor::new(vec![width], vec![1.0; width])?, store)?;
                add("bias", Tensor::zeros(vec![width]), store)?;
            }
            LayerSpec::GroupNorm { channels, .. } => {
                add(
                    "gain",
                    Tensor::new(vec![channels], vec![1.0; channels])?,
                    store,
                )?;
                add("bias", Tensor::zeros(vec![channels]), store)?;
            }
            LayerSpec::CausalSelfAttention { width, .. } => {
                let bound = 1.0 / (width as f64).sqrt();
                for p in ["query", "key", "value", "out"] {
                    add(
                        &format!("{p}.weight"),
                        uniform_tensor(vec![width, width], bound, rng),
                        store,
                    )?;
                    add(&format!("{p}.bias"), Tensor::zeros(vec![width]), store)?;
                }
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let fan_in = in_channels * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                add(
                    "weight",
                    uniform_tensor(vec![fan_in, out_channels], bound, rng),
                    store,
                )?;
                add("bias", Tensor::zeros(vec![out_channels]), store)?;
            }
            LayerSpec::Embedding { vocab, width } => {
                let normal = Normal::new(0.0, 0.02).expect("valid std");
                let data = (0..vocab * width).map(|_| normal.sample(rng)).collect();
                add("table", Tensor::new(vec![vocab, width], data)?, store)?;
            }
            LayerSpec::Activation(_) => {}
        }
        Ok(Layer {
            spec,
            name: name.to_string(),
            params,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Runs the layer on `input`, recording onto `tape`.
    ///
    /// Expected layouts: dense and norms act on the last axis; attention takes
    /// `[seq, width]` or `[batch, seq, width]`; conv1d and group-norm take
    /// `[len, ch]` or `[batch, len, ch]`; embedding takes a vector of integral ids.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        let last = *shape.last().unwrap_or(&0);
        let p = |i: usize, tape: &mut Tape| tape.param(store, self.params[i]);
        match self.spec {
            LayerSpec::Dense { input: din, .. } => {
                if last != din {
                    return Err(NnError::shape(&self.name, format!("[.., {din}]"), &shape));
                }
                let (w, b) = (p(0, tape), p(1, tape));
                let y = tape.matmul(input, w)?;
                tape.add_bias(y, b)
            }
            LayerSpec::LayerNorm { width } => {
                if last != width {
                    return Err(NnError::shape(&self.name, format!("[.., {width}]"), &shape));
                }
                let (g, b) = (p(0, tape), p(1, tape));
                tape.layer_norm(input, g, b, NORM_EPS)
            }
            LayerSpec::GroupNorm { channels, groups } => {
                let x = self.as_batched(tape, input, channels)?;
                let (g, b) = (p(0, tape), p(1, tape));
                let y = tape.group_norm(x, g, b, groups, NORM_EPS)?;
                tape.reshape(y, shape)
            }
            LayerSpec::CausalSelfAttention { width, heads } => {
                let x = self.as_batched(tape, input, width)?;
                let lin = |tape: &mut Tape, i: usize, x: Var| -> Result<Var> {
                    let w = tape.param(store, self.params[2 * i]);
                    let b = tape.param(store, self.params[2 * i + 1]);
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)
                };
                let q = lin(tape, 0, x)?;
                let k = lin(tape, 1, x)?;
                let v = lin(tape, 2, x)?;
                let a = tape.causal_attention(q, k, v, heads)?;
                let y = lin(tape, 3, a)?;
                tape.reshape(y, shape)
            }
            LayerSpec::Conv1d {
                in_channels,
                kernel,
                out_channels,
            } => {
                let x = self.as_batched(tape, input, in_channels)?;
                let cols = tape.im2col(x, kernel)?;
                let (w, b) = (p(0, tape), p(1, tape));
                let y = tape.matmul(cols, w)?;
                let y = tape.add_bias(y, b)?;
                let mut out_shape = shape;
                *out_shape.last_mut().unwrap() = out_channels;
                tape.reshape(y, out_shape)
            }
            LayerSpec::Embedding { .. } => {
                let ids = tape
                    .value(input)
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(NnError::shape(
                                &self.name,
                                "non-negative integral ids",
                                &shape,
                            ))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.embed(tape, store, &ids)
            }
            LayerSpec::Activation(act) => Ok(tape.activation(input, act)),
        }
    }

    /// Embedding lookup by id.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        match self.spec {
            LayerSpec::Embedding { .. } => {
                let table = tape.param(store, self.params[0]);
                tape.embedding(table, ids)
            }
            _ => Err(NnError::InvalidSpec {
                layer: self.name.clone(),
                reason: "not an embedding layer".into(),
            }),
        }
    }

    fn as_batched(&self, tape: &mut Tape, x: Var, width: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        match s.as_slice() {
            [l, c] if *c == width && *l > 0 => tape.reshape(x, vec![1, *l, *c]),
            [b, l, c] if *c == width && *l > 0 && *b > 0 => Ok(x),
            _ => Err(NnError::shape(
                &self.name,
                format!("[batch?, len, {width}]"),
                &s,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(&data);
    }

    #[test]
    fn dense_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Layer::new(
            LayerSpec::Dense {
                input: 3,
                output: 3,
            },
            "d",
            &mut store,
            &mut rng,
        )
        .unwrap();
        set(
            &mut store,
            "d.weight",
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
        );
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![1., 2., 3.]).unwrap();
        let y = l.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y), &[1., 2., 3.]);
    }

    #[test]
    fn dense_shape_error_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Layer::new(
            LayerSpec::Dense {
                input: 3,
                output: 2,
            },
            "proj",
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        let x = t.constant(vec![4], vec![0.; 4]).unwrap();
        match l.forward(&mut t, &store, x) {
            Err(NnError::Shape { layer, got, .. }) => {
                assert_eq!(layer, "proj");
                assert_eq!(got, vec![4]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Layer::new(
            LayerSpec::LayerNorm { width: 3 },
            "ln",
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![2.5; 3]).unwrap();
        let y = l.forward(&mut t, &store, x).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_delta_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
        };
        let l = Layer::new(spec, "c", &mut store, &mut rng).unwrap();
        set(&mut store, "c.weight", vec![0., 1., 0.]);
        let mut t = Tape::new();
        let x = t.constant(vec![3, 1], vec![4., 5., 6.]).unwrap();
        let y = l.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y), &[4., 5., 6.]);
        assert_eq!(t.shape(y), &[3, 1]);
    }

    #[test]
    fn spec_invariants() {
        assert!(LayerSpec::CausalSelfAttention { width: 6, heads: 4 }
            .validate("a")
            .is_err());
        assert!(LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2
        }
        .validate("c")
        .is_err());
        assert!(LayerSpec::GroupNorm {
            channels: 6,
            groups: 4
        }
        .validate("g")
        .is_err());
        assert!(LayerSpec::CausalSelfAttention { width: 8, heads: 4 }
            .validate("a")
            .is_ok());
    }

    #[test]
    fn attention_single_token_is_value_then_out_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let spec = LayerSpec::CausalSelfAttention { width: 4, heads: 2 };
        let l = Layer::new(spec, "att", &mut store, &mut rng).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.1];
        let mut t = Tape::new();
        let xv = t.constant(vec![1, 4], x.clone()).unwrap();
        let y = l.forward(&mut t, &store, xv).unwrap();

        let get = |n: &str| store.get(store.id(n).unwrap()).data().to_vec();
        let affine = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|j| b[j] + (0..4).map(|i| x[i] * w[i * 4 + j]).sum::<f64>())
                .collect()
        };
        let v = affine(&x, &get("att.value.weight"), &get("att.value.bias"));
        let want = affine(&v, &get("att.out.weight"), &get("att.out.bias"));
        for (a, b) in t.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_tokens_matches_hand_formula() {
        // width 2, one head, identity projections, zero bias:
        // out_t = Σ_{s≤t} softmax_s(x_t·x_s/√2) x_s
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = LayerSpec::CausalSelfAttention { width: 2, heads: 1 };
        let l = Layer::new(spec, "att", &mut store, &mut rng).unwrap();
        for p in ["query", "key", "value", "out"] {
            set(&mut store, &format!("att.{p}.weight"), vec![1., 0., 0., 1.]);
        }
        let x = [[1.0, 2.0], [-0.5, 0.25]];
        let mut t = Tape::new();
        let xv = t.constant(vec![2, 2], vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let y = l.forward(&mut t, &store, xv).unwrap();

        let s = 1.0 / 2f64.sqrt();
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let s10 = dot(x[1], x[0]) * s;
        let s11 = dot(x[1], x[1]) * s;
        let (e0, e1) = (s10.exp(), s11.exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let want = [
            x[0][0],
            x[0][1],
            p0 * x[0][0] + p1 * x[1][0],
            p0 * x[0][1] + p1 * x[1][1],
        ];
        for (a, b) in t.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let spec = LayerSpec::CausalSelfAttention { width: 8, heads: 2 };
        let l = Layer::new(spec, "att", &mut store, &mut rng).unwrap();
        let base: Vec<f64> = (0..5 * 8).map(|i| ((i * 7) as f64 * 0.13).sin()).collect();
        let run = |x: Vec<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(vec![5, 8], x).unwrap();
            let y = l.forward(&mut t, &store, xv).unwrap();
            t.value(y).to_vec()
        };
        let y0 = run(base.clone());
        for pos in 1..5 {
            let mut x = base.clone();
            for v in &mut x[pos * 8..] {
                *v += 3.7;
            }
            let y1 = run(x);
            assert_eq!(&y0[..pos * 8], &y1[..pos * 8]);
            assert_ne!(&y0[pos * 8..], &y1[pos * 8..]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let l = Layer::new(
            LayerSpec::CausalSelfAttention { width: 4, heads: 2 },
            "a",
            &mut store,
            &mut rng,
        )
        .unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(vec![3, 4], x.clone()).unwrap();
            let y = l.forward(&mut t, &store, xv).unwrap();
            t.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Layer::new(
            LayerSpec::Embedding { vocab: 3, width: 2 },
            "e",
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        assert!(l.embed(&mut t, &store, &[0, 2]).is_ok());
        assert!(l.embed(&mut t, &store, &[3]).is_err());
    }
}
