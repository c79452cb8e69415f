//! 1-D U-Net noise predictor on `[batch, len, channels]` activations.

use d2t_nn::{Activation, Layer, LayerSpec, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::NoisePredictor;
use crate::error::{D2tError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Down blocks; the up path mirrors it.
    pub depth: usize,
    pub base_width: usize,
    /// Width of the step and condition embeddings.
    pub emb_width: usize,
    pub groups: usize,
    pub kernel: usize,
    /// Shortest sequence a down block may pool to.
    pub min_len: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 6,
            base_width: 32,
            emb_width: 512,
            groups: 8,
            kernel: 3,
            min_len: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(D2tError::Config(format!("unet: {m}")));
        if self.depth == 0 {
            return fail("depth must be >= 1");
        }
        if self.base_width == 0 || self.groups == 0 || !self.base_width.is_multiple_of(self.groups) {
            return fail("base_width must be a positive multiple of groups");
        }
        if self.emb_width < 2 || !self.emb_width.is_multiple_of(2) {
            return fail("emb_width must be even");
        }
        if self.kernel.is_multiple_of(2) {
            return fail("kernel must be odd");
        }
        if self.min_len == 0 {
            return fail("min_len must be >= 1");
        }
        Ok(())
    }

    /// Which down blocks halve the sequence, given the input length.
    pub fn pooling_plan(&self, len: usize) -> Vec<bool> {
        let mut l = len;
        (0..self.depth)
            .map(|_| {
                let pool = l.is_multiple_of(2) && l / 2 >= self.min_len;
                if pool {
                    l /= 2;
                }
                pool
            })
            .collect()
    }
}

/// conv → group-norm → SiLU, plus a projection of the embedding added at
/// every position. Residual when the conv keeps the width.
#[derive(Clone, Debug)]
struct Block {
    conv: Layer,
    norm: Layer,
    proj: Layer,
    residual: bool,
}

impl Block {
    fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cfg: &UNetConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.base_width;
        Ok(Block {
            conv: Layer::new(
                LayerSpec::Conv1d {
                    in_channels: cin,
                    out_channels: c,
                    kernel: cfg.kernel,
                },
                &format!("{name}.conv"),
                store,
                rng,
            )?,
            norm: Layer::new(
                LayerSpec::GroupNorm {
                    channels: c,
                    groups: cfg.groups,
                },
                &format!("{name}.norm"),
                store,
                rng,
            )?,
            proj: Layer::new(
                LayerSpec::Dense {
                    input: cfg.emb_width,
                    output: c,
                },
                &format!("{name}.proj"),
                store,
                rng,
            )?,
            residual: cin == c,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, emb: Var) -> Result<Var> {
        let a = self.conv.forward(tape, store, h)?;
        let a = self.norm.forward(tape, store, a)?;
        let a = tape.activation(a, Activation::Silu);
        let p = self.proj.forward(tape, store, emb)?;
        let a = tape.add_seq_bias(a, p)?;
        if self.residual {
            Ok(tape.add(h, a)?)
        } else {
            Ok(a)
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    dim: usize,
    cond_dim: usize,
    pooling: Vec<bool>,
    stem: Layer,
    time: [Layer; 2],
    cond: [Layer; 2],
    null: ParamId,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    out: Layer,
}

impl UNet {
    /// Registers parameters under `prefix.*`. The output conv starts at zero,
    /// so the untrained net predicts zero noise.
    pub fn new<R: Rng + ?Sized>(
        config: UNetConfig,
        dim: usize,
        cond_dim: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if dim == 0 || cond_dim == 0 {
            return Err(D2tError::Config(
                "unet input and condition widths must be positive".into(),
            ));
        }
        let (c, e) = (config.base_width, config.emb_width);
        let name = |s: &str| format!("{prefix}.{s}");
        let stem = Layer::new(
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: c,
                kernel: config.kernel,
            },
            &name("stem"),
            store,
            rng,
        )?;
        let dense = |i, o, n: &str, store: &mut ParamStore, rng: &mut R| {
            Layer::new(
                LayerSpec::Dense {
                    input: i,
                    output: o,
                },
                &name(n),
                store,
                rng,
            )
        };
        let time = [
            dense(e, e, "time.0", store, rng)?,
            dense(e, e, "time.1", store, rng)?,
        ];
        let cond = [
            dense(cond_dim, e, "cond.0", store, rng)?,
            dense(e, e, "cond.1", store, rng)?,
        ];
        let null = store.add(name("null_token"), Tensor::zeros(vec![1, e]))?;
        let mut down = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            down.push(Block::new(
                &name(&format!("down.{i}")),
                c,
                &config,
                store,
                rng,
            )?);
        }
        let mid = Block::new(&name("mid"), c, &config, store, rng)?;
        let mut up = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            up.push(Block::new(
                &name(&format!("up.{i}")),
                2 * c,
                &config,
                store,
                rng,
            )?);
        }
        let out = Layer::new(
            LayerSpec::Conv1d {
                in_channels: c,
                out_channels: 1,
                kernel: config.kernel,
            },
            &name("out"),
            store,
            rng,
        )?;
        for &id in out.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(UNet {
            pooling: config.pooling_plan(dim),
            config,
            dim,
            cond_dim,
            stem,
            time,
            cond,
            null,
            down,
            mid,
            up,
            out,
        })
    }

    pub fn pooling(&self) -> &[bool] {
        &self.pooling
    }

    fn embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        steps: &[usize],
        cond: &[Option<&[f64]>],
    ) -> Result<Var> {
        let e = self.config.emb_width;
        let t = tape.constant(vec![steps.len(), e], sinusoidal(steps, e))?;
        let t = self.time[0].forward(tape, store, t)?;
        let t = tape.activation(t, Activation::Silu);
        let t = self.time[1].forward(tape, store, t)?;

        let given: Vec<&[f64]> = cond.iter().flatten().copied().collect();
        if let Some(bad) = given.iter().find(|y| y.len() != self.cond_dim) {
            return Err(D2tError::Shape(format!(
                "condition has {} values, expected {}",
                bad.len(),
                self.cond_dim
            )));
        }
        let null = tape.param(store, self.null);
        let table = if given.is_empty() {
            null
        } else {
            let y = tape.constant(vec![given.len(), self.cond_dim], given.concat())?;
            let y = self.cond[0].forward(tape, store, y)?;
            let y = tape.activation(y, Activation::Silu);
            let y = self.cond[1].forward(tape, store, y)?;
            tape.concat_rows(&[y, null])?
        };
        let mut next = 0;
        let idx: Vec<usize> = cond
            .iter()
            .map(|c| match c {
                Some(_) => {
                    next += 1;
                    next - 1
                }
                None => given.len(),
            })
            .collect();
        let c = tape.gather_rows(table, &idx)?;
        let sum = tape.add(t, c)?;
        Ok(tape.activation(sum, Activation::Silu))
    }
}

impl NoisePredictor for UNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        steps: &[usize],
        cond: &[Option<&[f64]>],
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let b = steps.len();
        if shape != [b, self.dim] || cond.len() != b {
            return Err(D2tError::Shape(format!(
                "unet expects x [{b}, {}] with {b} conditions, got {shape:?} and {}",
                self.dim,
                cond.len()
            )));
        }
        let emb = self.embedding(tape, store, steps, cond)?;
        let h = tape.reshape(x, vec![b, self.dim, 1])?;
        let mut h = self.stem.forward(tape, store, h)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, &pool) in self.down.iter().zip(&self.pooling) {
            h = block.forward(tape, store, h, emb)?;
            skips.push(h);
            if pool {
                h = tape.avg_pool2(h)?;
            }
        }
        h = self.mid.forward(tape, store, h, emb)?;
        for (i, block) in self.up.iter().enumerate() {
            let level = self.down.len() - 1 - i;
            if self.pooling[level] {
                h = tape.upsample2(h)?;
            }
            h = tape.concat_last(&[h, skips[level]])?;
            h = block.forward(tape, store, h, emb)?;
        }
        let y = self.out.forward(tape, store, h)?;
        Ok(tape.reshape(y, vec![b, self.dim])?)
    }
}

/// `[sin(k·f_j) .., cos(k·f_j) ..]` with `f_j = 10000^{-j/(width/2)}`.
pub fn sinusoidal(steps: &[usize], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(steps.len() * width);
    for &k in steps {
        let freqs = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| k as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            depth: 6,
            base_width: 8,
            emb_width: 16,
            groups: 4,
            kernel: 3,
            min_len: 2,
        }
    }

    #[test]
    fn pooling_plan_uses_stride_one_when_short() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.pooling_plan(128), vec![true; 6]);
        assert_eq!(
            cfg.pooling_plan(64),
            vec![true, true, true, true, true, false]
        );
        assert_eq!(
            cfg.pooling_plan(4),
            vec![true, false, false, false, false, false]
        );
        assert_eq!(
            cfg.pooling_plan(6),
            vec![true, false, false, false, false, false]
        );
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dim in [4usize, 6, 16, 24] {
            let mut store = ParamStore::new();
            let net = UNet::new(small(), dim, 3, "unet", &mut store, &mut rng).unwrap();
            for &id in net.out.params() {
                store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.1);
            }
            let mut tape = Tape::new();
            let x = tape
                .constant(vec![2, dim], (0..2 * dim).map(|i| i as f64 * 0.1).collect())
                .unwrap();
            let y = [0.1, 0.2, 0.3];
            let out = net
                .predict(&mut tape, &store, x, &[3, 7], &[Some(&y), None])
                .unwrap();
            assert_eq!(tape.shape(out), &[2, dim]);
            assert!(tape.value(out).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_init_output_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = UNet::new(small(), 8, 2, "unet", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 8], vec![0.5; 8]).unwrap();
        let out = net.predict(&mut tape, &store, x, &[0], &[None]).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_condition_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = UNet::new(small(), 8, 2, "unet", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 8], vec![0.5; 8]).unwrap();
        assert!(net
            .predict(&mut tape, &store, x, &[0], &[Some(&[1.0, 2.0, 3.0])])
            .is_err());
    }

    #[test]
    fn sinusoidal_step_zero() {
        let e = sinusoidal(&[0], 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
