//! Guided training loss, reverse sampler and the persisted model bundle.

use std::path::Path;

use d2t_nn::{AdamW, DType, NamedTensorStore, ParamStore, StoredTensor, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::unet::{UNet, UNetConfig};
use super::{
    forward_noise_closed, rms_scale, vector_to_channel, DiffusionSchedule, GuidanceConfig,
};
use crate::channel::C64;
use crate::error::{D2tError, Result};

/// A network `ε_θ(x_k, k, y)`; `None` conditions select the learned null token.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// `x` is `[batch, dim]`; returns a var of the same shape.
    fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        steps: &[usize],
        cond: &[Option<&[f64]>],
    ) -> Result<Var>;
}

/// Single-example forward pass.
pub fn predict_noise<P: NoisePredictor>(
    net: &P,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    x: &[f64],
    k: usize,
    cond: Option<&[f64]>,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    let mut tape = Tape::new();
    let xv = tape.constant(vec![1, x.len()], x.to_vec())?;
    let out = net.predict(&mut tape, store, xv, &[k], &[cond])?;
    Ok(tape.value(out).to_vec())
}

fn standard_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Records the guided denoising loss `mean_i ‖ε_i - ε̃_i‖²` on `tape`.
///
/// Each example draws its own level `k` and noise. In the default mode both
/// the conditional and null passes run and are mixed with `η` inside the
/// loss; with `cfg_dropout` the condition is dropped at random instead.
#[allow(clippy::too_many_arguments)]
pub fn dm_loss<P: NoisePredictor, R: Rng + ?Sized>(
    net: &P,
    store: &ParamStore,
    tape: &mut Tape,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    x0: &[Vec<f64>],
    cond: &[Vec<f64>],
    rng: &mut R,
) -> Result<Var> {
    let b = x0.len();
    if b == 0 || cond.len() != b {
        return Err(D2tError::Shape(format!(
            "batch of {b} samples with {} conditions",
            cond.len()
        )));
    }
    let d = net.dim();
    let mut steps = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * d);
    let mut xk = Vec::with_capacity(b * d);
    for x in x0 {
        if x.len() != d {
            return Err(D2tError::Shape(format!(
                "sample has {} values, expected {d}",
                x.len()
            )));
        }
        let k = rng.random_range(0..schedule.steps());
        let e = standard_normal_vec(d, rng);
        xk.extend(forward_noise_closed(x, k, &e, schedule)?);
        eps.extend(e);
        steps.push(k);
    }

    let pred = if guidance.cfg_dropout {
        let c: Vec<Option<&[f64]>> = cond
            .iter()
            .map(|y| (rng.random::<f64>() >= guidance.dropout_prob).then_some(y.as_slice()))
            .collect();
        let x = tape.constant(vec![b, d], xk)?;
        net.predict(tape, store, x, &steps, &c)?
    } else if guidance.eta == 1.0 || guidance.eta == 0.0 {
        let c: Vec<Option<&[f64]>> = if guidance.eta == 1.0 {
            cond.iter().map(|y| Some(y.as_slice())).collect()
        } else {
            vec![None; b]
        };
        let x = tape.constant(vec![b, d], xk)?;
        net.predict(tape, store, x, &steps, &c)?
    } else {
        let mut c: Vec<Option<&[f64]>> = cond.iter().map(|y| Some(y.as_slice())).collect();
        c.extend(std::iter::repeat_n(None, b));
        let both = [xk.as_slice(), xk.as_slice()].concat();
        let x = tape.constant(vec![2 * b, d], both)?;
        let steps2 = [steps.as_slice(), steps.as_slice()].concat();
        let out = net.predict(tape, store, x, &steps2, &c)?;
        let first: Vec<usize> = (0..b).collect();
        let second: Vec<usize> = (b..2 * b).collect();
        let ec = tape.gather_rows(out, &first)?;
        let eu = tape.gather_rows(out, &second)?;
        let ec = tape.scale(ec, guidance.eta);
        let eu = tape.scale(eu, 1.0 - guidance.eta);
        tape.add(ec, eu)?
    };
    Ok(tape.mse_rows(pred, &eps)?)
}

/// One AdamW update on the guided loss; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn dm_train_step<P: NoisePredictor, R: Rng + ?Sized>(
    net: &P,
    store: &mut ParamStore,
    opt: &mut AdamW,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    x0: &[Vec<f64>],
    cond: &[Vec<f64>],
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = dm_loss(net, store, &mut tape, schedule, guidance, x0, cond, rng)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss, None)?;
    grads.accumulate(store)?;
    opt.step(store)?;
    Ok(value)
}

/// Reverse chain from `x_start` at level `K-1` down to data.
///
/// `noise = None` forces `z = 0` at every step, making the chain a
/// deterministic function of `x_start`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_from<P: NoisePredictor, R: Rng + ?Sized>(
    net: &P,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    eta: f64,
    cond: &[Option<&[f64]>],
    x_start: Vec<Vec<f64>>,
    mut noise: Option<&mut R>,
) -> Result<Vec<Vec<f64>>> {
    let b = cond.len();
    let d = net.dim();
    if x_start.len() != b || x_start.iter().any(|x| x.len() != d) {
        return Err(D2tError::Shape(format!(
            "need {b} start vectors of length {d}"
        )));
    }
    let mut xs = x_start;
    // Rows fed to the net: (example, conditional?) pairs.
    let mut rows: Vec<(usize, bool)> = Vec::new();
    for (i, c) in cond.iter().enumerate() {
        if c.is_some() && eta != 0.0 {
            rows.push((i, true));
        }
        if c.is_none() || eta != 1.0 {
            rows.push((i, false));
        }
    }
    let row_cond: Vec<Option<&[f64]>> = rows
        .iter()
        .map(|&(i, c)| if c { cond[i] } else { None })
        .collect();

    for k in (0..schedule.steps()).rev() {
        let mut tape = Tape::new();
        let flat: Vec<f64> = rows
            .iter()
            .flat_map(|&(i, _)| xs[i].iter().copied())
            .collect();
        let x = tape.constant(vec![rows.len(), d], flat)?;
        let out = net.predict(&mut tape, store, x, &vec![k; rows.len()], &row_cond)?;
        let pred = tape.value(out);

        let mut eps = vec![vec![0.0; d]; b];
        for (r, &(i, is_cond)) in rows.iter().enumerate() {
            let w = match (cond[i].is_some(), is_cond) {
                (false, _) => 1.0,
                (true, true) => eta,
                (true, false) => 1.0 - eta,
            };
            for (e, p) in eps[i].iter_mut().zip(&pred[r * d..(r + 1) * d]) {
                *e += w * p;
            }
        }

        let coef = schedule.betas[k] / (1.0 - schedule.alpha_bars[k]).sqrt();
        let inv = 1.0 / schedule.alphas[k].sqrt();
        let sigma = schedule.posterior_var[k].sqrt();
        for (x, e) in xs.iter_mut().zip(&eps) {
            for (xv, ev) in x.iter_mut().zip(e) {
                *xv = inv * (*xv - coef * ev);
            }
            if k > 0 {
                if let Some(rng) = noise.as_deref_mut() {
                    for xv in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *xv += sigma * z;
                    }
                }
            }
            if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
                return Err(D2tError::SamplerDiverged {
                    k,
                    detail: format!(
                        "non-finite value {bad} (β_k = {}, ᾱ_k = {})",
                        schedule.betas[k], schedule.alpha_bars[k]
                    ),
                });
            }
        }
    }
    Ok(xs)
}

/// Draws `x_K ~ N(0, I)` per condition and runs the stochastic reverse chain.
pub fn reverse_sample<P: NoisePredictor, R: Rng + ?Sized>(
    net: &P,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    eta: f64,
    cond: &[Option<&[f64]>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let start = (0..cond.len())
        .map(|_| standard_normal_vec(net.dim(), rng))
        .collect();
    reverse_sample_from(net, store, schedule, eta, cond, start, Some(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "K")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
    pub cfg_dropout: bool,
    pub dropout_prob: f64,
    pub base_width: usize,
    pub emb_width: usize,
    pub depth: usize,
    pub groups: usize,
    pub kernel: usize,
    /// Fixed channel scale; the data RMS is used when absent.
    pub norm_scale: Option<f64>,
    /// Conditions per reverse-chain batch when sampling.
    pub sample_batch: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        let g = GuidanceConfig::default();
        DiffusionConfig {
            steps: 500,
            beta_min: 1e-4,
            beta_max: 0.02,
            eta: g.eta,
            cfg_dropout: g.cfg_dropout,
            dropout_prob: g.dropout_prob,
            base_width: u.base_width,
            emb_width: u.emb_width,
            depth: u.depth,
            groups: u.groups,
            kernel: u.kernel,
            norm_scale: None,
            sample_batch: 64,
        }
    }
}

impl DiffusionConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            eta: self.eta,
            cfg_dropout: self.cfg_dropout,
            dropout_prob: self.dropout_prob,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_width: self.base_width,
            emb_width: self.emb_width,
            groups: self.groups,
            kernel: self.kernel,
            min_len: UNetConfig::default().min_len,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.steps, self.beta_min, self.beta_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.guidance().validate()?;
        self.unet().validate()?;
        if let Some(s) = self.norm_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(D2tError::Config(format!(
                    "norm_scale must be positive, got {s}"
                )));
            }
        }
        if self.sample_batch == 0 {
            return Err(D2tError::Config("sample_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trained network plus everything needed to sample raw channels from it.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub schedule: DiffusionSchedule,
    pub net: UNet,
    pub store: ParamStore,
    pub n: usize,
    pub m: usize,
    /// Divides raw channel vectors.
    pub x_scale: f64,
    /// Divides raw pilot observations.
    pub y_scale: f64,
}

const PREFIX: &str = "dm";

impl DiffusionModel {
    pub fn new(
        config: DiffusionConfig,
        n: usize,
        m: usize,
        cond_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::new(
            config.unet(),
            2 * n * m,
            cond_dim,
            PREFIX,
            &mut store,
            &mut rng,
        )?;
        Ok(DiffusionModel {
            schedule: config.schedule()?,
            config,
            net,
            store,
            n,
            m,
            x_scale: 1.0,
            y_scale: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.cond_dim()
    }

    /// Sets the normalization from training data (or the configured scale).
    pub fn fit_scales(&mut self, states: &[Vec<f64>], pilots: &[Vec<f64>]) {
        self.x_scale = self
            .config
            .norm_scale
            .unwrap_or_else(|| rms_scale(states.iter().map(Vec::as_slice)));
        self.y_scale = rms_scale(pilots.iter().map(Vec::as_slice));
    }

    fn scaled(v: &[f64], s: f64) -> Vec<f64> {
        v.iter().map(|x| x / s).collect()
    }

    /// One optimizer step on raw (unnormalized) channel vectors and pilots.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        opt: &mut AdamW,
        states: &[&[f64]],
        pilots: &[&[f64]],
        rng: &mut R,
    ) -> Result<f64> {
        let x0: Vec<Vec<f64>> = states
            .iter()
            .map(|s| Self::scaled(s, self.x_scale))
            .collect();
        let y: Vec<Vec<f64>> = pilots
            .iter()
            .map(|p| Self::scaled(p, self.y_scale))
            .collect();
        let guidance = self.config.guidance();
        dm_train_step(
            &self.net,
            &mut self.store,
            opt,
            &self.schedule,
            &guidance,
            &x0,
            &y,
            rng,
        )
    }

    /// Raw channel vectors, one per condition (`None` samples unconditionally).
    pub fn sample_vectors<R: Rng + ?Sized>(
        &self,
        pilots: &[Option<&[f64]>],
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pilots.len());
        for chunk in pilots.chunks(self.config.sample_batch) {
            let y: Vec<Option<Vec<f64>>> = chunk
                .iter()
                .map(|p| p.map(|p| Self::scaled(p, self.y_scale)))
                .collect();
            let yref: Vec<Option<&[f64]>> = y.iter().map(|p| p.as_deref()).collect();
            let xs = reverse_sample(
                &self.net,
                &self.store,
                &self.schedule,
                self.config.eta,
                &yref,
                rng,
            )?;
            out.extend(
                xs.into_iter()
                    .map(|x| x.into_iter().map(|v| v * self.x_scale).collect::<Vec<_>>()),
            );
        }
        Ok(out)
    }

    /// Sampled cascaded channels `H` (row-major `N × M`).
    pub fn sample_channels<R: Rng + ?Sized>(
        &self,
        pilots: &[Option<&[f64]>],
        rng: &mut R,
    ) -> Result<Vec<Vec<C64>>> {
        self.sample_vectors(pilots, rng)?
            .iter()
            .map(|x| vector_to_channel(x))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<NamedTensorStore> {
        let mut ck = NamedTensorStore::new();
        let c = &self.config;
        let meta: [(&str, f64); 16] = [
            ("n", self.n as f64),
            ("m", self.m as f64),
            ("cond_dim", self.cond_dim() as f64),
            ("x_scale", self.x_scale),
            ("y_scale", self.y_scale),
            ("K", c.steps as f64),
            ("beta_min", c.beta_min),
            ("beta_max", c.beta_max),
            ("eta", c.eta),
            ("cfg_dropout", if c.cfg_dropout { 1.0 } else { 0.0 }),
            ("dropout_prob", c.dropout_prob),
            ("base_width", c.base_width as f64),
            ("emb_width", c.emb_width as f64),
            ("depth", c.depth as f64),
            ("groups", c.groups as f64),
            ("kernel", c.kernel as f64),
        ];
        for (k, v) in meta {
            ck.insert(format!("meta.{k}"), StoredTensor::scalar(v))?;
        }
        ck.insert(
            "meta.sample_batch",
            StoredTensor::scalar(c.sample_batch as f64),
        )?;
        if let Some(s) = c.norm_scale {
            ck.insert("meta.norm_scale", StoredTensor::scalar(s))?;
        }
        ck.insert(
            "schedule.betas",
            StoredTensor::new(
                vec![self.schedule.steps()],
                DType::F64,
                self.schedule.betas.clone(),
            )?,
        )?;
        self.store.export("", &mut ck, DType::F64)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &NamedTensorStore) -> Result<Self> {
        let get = |k: &str| ck.scalar(&format!("meta.{k}")).map_err(D2tError::from);
        let int = |k: &str| get(k).map(|v| v as usize);
        let config = DiffusionConfig {
            steps: int("K")?,
            beta_min: get("beta_min")?,
            beta_max: get("beta_max")?,
            eta: get("eta")?,
            cfg_dropout: get("cfg_dropout")? != 0.0,
            dropout_prob: get("dropout_prob")?,
            base_width: int("base_width")?,
            emb_width: int("emb_width")?,
            depth: int("depth")?,
            groups: int("groups")?,
            kernel: int("kernel")?,
            norm_scale: ck.get("meta.norm_scale").map(|t| t.values()[0]),
            sample_batch: int("sample_batch")?,
        };
        let mut model = DiffusionModel::new(config, int("n")?, int("m")?, int("cond_dim")?, 0)?;
        let betas = ck
            .get("schedule.betas")
            .ok_or_else(|| D2tError::Artifact("checkpoint lacks schedule.betas".into()))?;
        if betas.values() != model.schedule.betas.as_slice() {
            return Err(D2tError::Artifact(
                "stored schedule disagrees with its parameters".into(),
            ));
        }
        model.store.import("", ck)?;
        model.x_scale = get("x_scale")?;
        model.y_scale = get("y_scale")?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&NamedTensorStore::load(path)?)
    }
}
