//! The five pipeline stages. Each stage writes into
//! `out_dir/<stage>-<hash>`, where the hash chains the stage's own config
//! with the hashes of the stages it reads from; a downstream stage therefore
//! only ever finds artifacts produced under the current configuration.
//!
//! Everything a stage writes is a function of (config, seed, inputs) except
//! `timing.json`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use d2t_nn::{AdamW, AdamWConfig, DType, NamedTensorStore, StoredTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::channel::{EnvConfig, Environment, C64};
use crate::collect::{
    collect_trajectories, derive_seed, expert_action, make_fewshot_buffer, random_action,
    random_trajectories,
};
use crate::config::{config_hash, ExperimentConfig};
use crate::diffusion::{channel_to_vector, vector_to_channel, DiffusionModel};
use crate::dt::{
    dt_train_step, rollout, DecisionTransformer, EpisodeRecord, PerfectCsi, PrecomputedSource,
};
use crate::error::{D2tError, Result};
use crate::metrics::{channel_histograms, ks_statistic, write_rows, MetricsLog};
use crate::trajectory::TrajectoryBuffer;

pub const BUFFER_FILE: &str = "buffer.bin";
pub const FEWSHOT_FILE: &str = "fewshot.bin";
pub const DM_FILE: &str = "dm.ckpt";
pub const DT_FILE: &str = "dt.ckpt";
pub const FINETUNED_FILE: &str = "dt_finetuned.ckpt";
pub const SCRATCH_FILE: &str = "dt_scratch.ckpt";
pub const EVAL_CHANNELS_FILE: &str = "eval_channels.bin";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Collect,
    TrainDm,
    PretrainDt,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Collect,
        Stage::TrainDm,
        Stage::PretrainDt,
        Stage::Finetune,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::TrainDm => "train-dm",
            Stage::PretrainDt => "pretrain-dt",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Collect => 101,
            Stage::TrainDm => 202,
            Stage::PretrainDt => 303,
            Stage::Finetune => 404,
            Stage::Eval => 505,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    D2t,
    DtPc,
    ScratchDt,
    Random,
    Expert,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::D2t,
        Variant::DtPc,
        Variant::ScratchDt,
        Variant::Random,
        Variant::Expert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::D2t => "d2t",
            Variant::DtPc => "dt-pc",
            Variant::ScratchDt => "scratch-dt",
            Variant::Random => "random",
            Variant::Expert => "expert",
        }
    }
}

impl FromStr for Variant {
    type Err = D2tError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| D2tError::Config(format!("unknown variant '{s}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Chained per-stage hashes of the configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageHashes(BTreeMap<Stage, String>);

impl StageHashes {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let t = &cfg.train;
        let collect = config_hash(&[
            json!("collect"),
            json!(cfg.seed),
            json!(cfg.env),
            json!(cfg.presets),
            json!(cfg.held_out),
            json!(cfg.expert),
        ]);
        let dm = config_hash(&[
            json!("train-dm"),
            json!(collect),
            json!(cfg.diffusion),
            json!([t.dm_lr, t.weight_decay]),
            json!([t.dm_iters, t.dm_batch, t.log_every]),
            json!(t.dm_include_fewshot),
        ]);
        let dt = config_hash(&[
            json!("pretrain-dt"),
            json!(collect),
            json!(cfg.dt),
            json!([t.dt_lr, t.weight_decay]),
            json!([t.dt_iters, t.dt_batch, t.log_every]),
            json!(cfg.diffusion.norm_scale),
        ]);
        let ft = config_hash(&[
            json!("finetune"),
            json!(dt),
            json!(dm),
            json!([t.finetune_lr_factor, t.scratch_lr]),
            json!([t.finetune_iters, t.curve_every, t.dt_batch, t.log_every]),
            json!(cfg.eval),
        ]);
        let eval = config_hash(&[json!("eval"), json!(ft), json!(cfg.eval)]);
        StageHashes(BTreeMap::from([
            (Stage::Collect, collect),
            (Stage::TrainDm, dm),
            (Stage::PretrainDt, dt),
            (Stage::Finetune, ft),
            (Stage::Eval, eval),
        ]))
    }

    pub fn get(&self, s: Stage) -> &str {
        &self.0[&s]
    }
}

pub fn stage_dir(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    let h = StageHashes::new(cfg);
    cfg.out_dir
        .join(format!("{}-{}", stage.name(), h.get(stage)))
}

fn input_file(cfg: &ExperimentConfig, stage: Stage, file: &str) -> Result<PathBuf> {
    let p = stage_dir(cfg, stage).join(file);
    if !p.exists() {
        return Err(D2tError::Artifact(format!(
            "{} not found; run `{}` with this configuration first",
            p.display(),
            stage.name()
        )));
    }
    Ok(p)
}

fn stage_seed(cfg: &ExperimentConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, stage.stream())
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// What a stage produced.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub dir: PathBuf,
    pub metrics: MetricsLog,
    pub files: Vec<String>,
}

struct StageRun {
    stage: Stage,
    dir: PathBuf,
    metrics: MetricsLog,
    files: Vec<String>,
    started: Instant,
}

impl StageRun {
    fn start(cfg: &ExperimentConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let dir = stage_dir(cfg, stage);
        std::fs::create_dir_all(&dir)?;
        Ok(StageRun {
            stage,
            metrics: MetricsLog::new(stage.name(), cfg.seed),
            dir,
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    /// Writes metrics, the manifest and the timing file.
    fn finish(mut self, cfg: &ExperimentConfig, metrics_name: &str) -> Result<StageReport> {
        let mpath = self.path(metrics_name);
        self.metrics.write_csv(&mpath)?;
        let hashes = StageHashes::new(cfg);
        let mut files = BTreeMap::new();
        for f in &self.files {
            files.insert(f.clone(), sha256_file(self.dir.join(f))?);
        }
        let manifest = json!({
            "stage": self.stage.name(),
            "hash": hashes.get(self.stage),
            "seed": cfg.seed,
            "upstream": Stage::ALL.iter().filter(|s| **s < self.stage).map(|s| (s.name(), hashes.get(*s))).collect::<BTreeMap<_, _>>(),
            "files": files,
            "config": cfg,
        });
        let suffix = metrics_name
            .strip_prefix("metrics")
            .unwrap_or(metrics_name)
            .replace(".csv", ".json");
        std::fs::write(
            self.dir.join(format!("manifest{suffix}")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let timing = json!({ "stage": self.stage.name(), "wall_clock_s": self.started.elapsed().as_secs_f64() });
        std::fs::write(
            self.dir.join(format!("timing{suffix}")),
            serde_json::to_string_pretty(&timing)?,
        )?;
        Ok(StageReport {
            stage: self.stage,
            dir: self.dir,
            metrics: self.metrics,
            files: self.files,
        })
    }
}

fn save_buffer(run: &mut StageRun, buf: &TrajectoryBuffer, stem: &str) -> Result<()> {
    let p = run.path(&format!("{stem}.bin"));
    buf.save(p)?;
    let p = run.path(&format!("{stem}.jsonl"));
    buf.write_jsonl(p)
}

/// Expert trajectories from the pre-training presets and few-shot data from
/// the held-out preset.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<StageReport> {
    let mut run = StageRun::start(cfg, Stage::Collect)?;
    let seed = stage_seed(cfg, Stage::Collect);
    let envs = cfg.pretrain_envs()?;
    let buf = collect_trajectories(&envs, &cfg.expert, cfg.expert.episodes_per_env, seed)?;
    let held = cfg.held_out_env()?;
    let fewshot = make_fewshot_buffer(
        &held,
        envs.len() as u32,
        &cfg.expert,
        cfg.expert.fewshot_episodes,
        derive_seed(seed, 1),
    )?;
    save_buffer(&mut run, &buf, "buffer")?;
    save_buffer(&mut run, &fewshot, "fewshot")?;

    for (i, env) in envs.iter().enumerate() {
        let rewards: Vec<f64> = buf
            .trajectories()
            .iter()
            .filter(|t| t.env_id == i as u32)
            .flat_map(|t| t.rewards.iter().copied())
            .collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        run.metrics
            .push(0, &format!("mean_reward_{}", cfg.presets[i].name), mean)?;
        let random = random_trajectories(env, i as u32, cfg.expert.episodes_per_env.min(8), seed)?;
        run.metrics.push(
            0,
            &format!("random_mean_reward_{}", cfg.presets[i].name),
            random.mean_reward(),
        )?;
    }
    run.metrics.push(0, "mean_reward", buf.mean_reward())?;
    run.metrics.push(0, "trajectories", buf.len() as f64)?;
    run.metrics
        .push(0, "fewshot_mean_reward", fewshot.mean_reward())?;
    run.metrics
        .push(0, "fewshot_trajectories", fewshot.len() as f64)?;
    run.finish(cfg, METRICS_FILE)
}

pub fn load_buffers(cfg: &ExperimentConfig) -> Result<(TrajectoryBuffer, TrajectoryBuffer)> {
    Ok((
        TrajectoryBuffer::load(input_file(cfg, Stage::Collect, BUFFER_FILE)?)?,
        TrajectoryBuffer::load(input_file(cfg, Stage::Collect, FEWSHOT_FILE)?)?,
    ))
}

/// Trains the conditional diffusion model on (channel, pilot) pairs.
pub fn cmd_train_dm(cfg: &ExperimentConfig) -> Result<StageReport> {
    let mut run = StageRun::start(cfg, Stage::TrainDm)?;
    let seed = stage_seed(cfg, Stage::TrainDm);
    let (buf, fewshot) = load_buffers(cfg)?;
    let mut states: Vec<&[f64]> = Vec::new();
    let mut pilots: Vec<&[f64]> = Vec::new();
    let sources: Vec<&TrajectoryBuffer> = if cfg.train.dm_include_fewshot {
        vec![&buf, &fewshot]
    } else {
        vec![&buf]
    };
    for t in sources.iter().flat_map(|b| b.trajectories()) {
        states.extend(t.states.iter().map(Vec::as_slice));
        pilots.extend(t.pilots.iter().map(Vec::as_slice));
    }
    if states.is_empty() {
        return Err(D2tError::Buffer("no channel samples to train on".into()));
    }
    let mut model = DiffusionModel::new(
        cfg.diffusion.clone(),
        buf.n,
        buf.m,
        buf.pilot_len,
        derive_seed(seed, 0),
    )?;
    let owned_s: Vec<Vec<f64>> = states.iter().map(|s| s.to_vec()).collect();
    let owned_p: Vec<Vec<f64>> = pilots.iter().map(|s| s.to_vec()).collect();
    model.fit_scales(&owned_s, &owned_p);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.train.dm_lr,
            weight_decay: cfg.train.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    run.metrics.push(0, "x_scale", model.x_scale)?;
    run.metrics.push(0, "y_scale", model.y_scale)?;
    let mut window = Vec::new();
    for step in 1..=cfg.train.dm_iters {
        let idx: Vec<usize> = (0..cfg.train.dm_batch)
            .map(|_| rand::Rng::random_range(&mut rng, 0..states.len()))
            .collect();
        let xs: Vec<&[f64]> = idx.iter().map(|&i| states[i]).collect();
        let ys: Vec<&[f64]> = idx.iter().map(|&i| pilots[i]).collect();
        let loss = model.train_step(&mut opt, &xs, &ys, &mut rng)?;
        window.push(loss);
        if step == 1 || step % cfg.train.log_every == 0 || step == cfg.train.dm_iters {
            run.metrics.push(step as u64, "loss", loss)?;
            run.metrics.push(
                step as u64,
                "loss_avg",
                window.iter().sum::<f64>() / window.len() as f64,
            )?;
            window.clear();
        }
    }
    let p = run.path(DM_FILE);
    model.save(p)?;
    run.finish(cfg, METRICS_FILE)
}

fn dt_optimizer(dt: &DecisionTransformer, lr: f64, cfg: &ExperimentConfig) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr,
            weight_decay: cfg.train.weight_decay,
            ..AdamWConfig::default()
        },
        &dt.store,
    )
}

/// Behavior-clones the pre-training buffer.
pub fn cmd_pretrain_dt(cfg: &ExperimentConfig) -> Result<StageReport> {
    let mut run = StageRun::start(cfg, Stage::PretrainDt)?;
    let seed = stage_seed(cfg, Stage::PretrainDt);
    let (buf, _) = load_buffers(cfg)?;
    let mut dt = DecisionTransformer::new(
        cfg.dt.clone(),
        buf.state_dim(),
        buf.n,
        buf.horizon,
        derive_seed(seed, 0),
    )?;
    dt.fit_scales(&buf, cfg.diffusion.norm_scale);
    let mut opt = dt_optimizer(&dt, cfg.train.dt_lr, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    run.metrics.push(0, "state_scale", dt.state_scale)?;
    run.metrics.push(0, "rtg_scale", dt.rtg_scale)?;
    let mut window = Vec::new();
    for step in 1..=cfg.train.dt_iters {
        let loss = dt_train_step(&mut dt, &mut opt, &buf, cfg.train.dt_batch, &mut rng)?;
        window.push(loss);
        if step == 1 || step % cfg.train.log_every == 0 || step == cfg.train.dt_iters {
            run.metrics.push(step as u64, "loss", loss)?;
            run.metrics.push(
                step as u64,
                "loss_avg",
                window.iter().sum::<f64>() / window.len() as f64,
            )?;
            window.clear();
        }
    }
    let p = run.path(DT_FILE);
    dt.save(p)?;
    run.finish(cfg, METRICS_FILE)
}

/// Seeds of the held-out evaluation episodes; the channel stream of an
/// episode does not depend on the actions taken.
fn episode_env(env: &EnvConfig, eval_seed: u64, episode: usize) -> Result<Environment> {
    Environment::with_seed(env.clone(), derive_seed(eval_seed, episode as u64))
}

fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, 606)
}

/// True channels and pilots of the first `episodes` evaluation episodes.
pub fn eval_channel_stream(
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
) -> Result<Vec<(Vec<Vec<C64>>, Vec<Vec<f64>>)>> {
    (0..episodes)
        .map(|e| {
            let mut en = episode_env(env, seed, e)?;
            let mut hs = Vec::with_capacity(env.episode_len);
            let mut ys = Vec::with_capacity(env.episode_len);
            for _ in 0..env.episode_len {
                hs.push(en.channel().cascaded.clone());
                ys.push(en.pilot().y.clone());
                en.step(&vec![0.0; env.n])?;
            }
            Ok((hs, ys))
        })
        .collect()
}

/// Diffusion samples for every slot of the evaluation episodes, from one
/// seeded stream. Returned as raw channel vectors `[episode][slot]`.
pub fn generate_eval_channels(
    dm: &DiffusionModel,
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let stream = eval_channel_stream(env, seed, episodes)?;
    let pilots: Vec<Option<&[f64]>> = stream
        .iter()
        .flat_map(|(_, ys)| ys.iter().map(|y| Some(y.as_slice())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let flat = dm.sample_vectors(&pilots, &mut rng)?;
    Ok(flat
        .chunks(env.episode_len)
        .map(<[Vec<f64>]>::to_vec)
        .collect())
}

fn save_eval_channels(path: &Path, channels: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut ck = NamedTensorStore::new();
    for (e, ep) in channels.iter().enumerate() {
        let d = ep.first().map(Vec::len).unwrap_or(0);
        ck.insert(
            format!("episode.{e}"),
            StoredTensor::new(vec![ep.len(), d], DType::F64, ep.concat())?,
        )?;
    }
    ck.save(path)?;
    Ok(())
}

fn load_eval_channels(path: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let ck = NamedTensorStore::load(path)?;
    let mut out = Vec::new();
    while let Some(t) = ck.get(&format!("episode.{}", out.len())) {
        let d = t.shape()[1];
        out.push(t.values().chunks(d).map(<[f64]>::to_vec).collect());
    }
    Ok(out)
}

/// Where a DT gets its per-slot channel during evaluation.
#[derive(Clone, Copy)]
pub enum CsiMode<'a> {
    Perfect,
    Generated(&'a [Vec<Vec<f64>>]),
}

/// Rolls out `dt` on evaluation episodes `0..episodes`.
pub fn evaluate_dt(
    dt: &DecisionTransformer,
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
    target: f64,
    csi: CsiMode<'_>,
) -> Result<Vec<EpisodeRecord>> {
    (0..episodes)
        .map(|e| {
            let mut en = episode_env(env, seed, e)?;
            match csi {
                CsiMode::Perfect => rollout(dt, &mut PerfectCsi, &mut en, target),
                CsiMode::Generated(all) => {
                    let ep = all.get(e).ok_or_else(|| {
                        D2tError::Artifact(format!("no generated channels for episode {e}"))
                    })?;
                    let queue = ep
                        .iter()
                        .map(|x| vector_to_channel(x))
                        .collect::<Result<VecDeque<_>>>()?;
                    rollout(dt, &mut PrecomputedSource { queue }, &mut en, target)
                }
            }
        })
        .collect()
}

/// Random or expert phases on the same evaluation episodes.
pub fn evaluate_baseline(
    variant: Variant,
    cfg: &ExperimentConfig,
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
) -> Result<Vec<EpisodeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, variant as u64 + 7));
    (0..episodes)
        .map(|e| {
            let mut en = episode_env(env, seed, e)?;
            let mut rec = EpisodeRecord {
                rewards: Vec::new(),
                returns_to_go: vec![0.0],
                actions: Vec::new(),
            };
            for _ in 0..env.episode_len {
                let ch = en.channel().clone();
                let a = match variant {
                    Variant::Expert => expert_action(&ch, &cfg.expert, &mut rng)?,
                    _ => random_action(env.n, &mut rng),
                };
                let r = en.step(&a)?.reward;
                rec.returns_to_go
                    .push(rec.returns_to_go.last().copied().unwrap_or(0.0) - r);
                rec.rewards.push(r);
                rec.actions.push(a);
            }
            Ok(rec)
        })
        .collect()
}

pub fn mean_rate(records: &[EpisodeRecord]) -> f64 {
    let n: usize = records.iter().map(|r| r.rewards.len()).sum();
    records.iter().flat_map(|r| r.rewards.iter()).sum::<f64>() / n.max(1) as f64
}

/// Target return for held-out rollouts.
pub fn target_return(
    cfg: &ExperimentConfig,
    buf: &TrajectoryBuffer,
    fewshot: &TrajectoryBuffer,
) -> f64 {
    let best = if fewshot.is_empty() {
        buf.best_return()
    } else {
        fewshot.best_return()
    };
    cfg.eval.target_factor * best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub model: String,
    pub step: u64,
    pub mean_rate: f64,
}

/// First step at which the curve reaches `level`.
pub fn steps_to_reach(curve: &[CurvePoint], level: f64) -> Option<u64> {
    curve.iter().find(|p| p.mean_rate >= level).map(|p| p.step)
}

/// Fine-tunes the pre-trained DT on the few-shot buffer, and trains a
/// from-scratch baseline on the same data, recording learning curves of both
/// with generated channels on the held-out preset.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<StageReport> {
    let mut run = StageRun::start(cfg, Stage::Finetune)?;
    let seed = stage_seed(cfg, Stage::Finetune);
    let (buf, fewshot) = load_buffers(cfg)?;
    let dt_path = input_file(cfg, Stage::PretrainDt, DT_FILE)?;
    let mut dt = DecisionTransformer::load(&dt_path)?;
    let dm = DiffusionModel::load(input_file(cfg, Stage::TrainDm, DM_FILE)?)?;
    let env = cfg.held_out_env()?;
    let es = eval_seed(cfg);
    let episodes = cfg.eval.episodes.max(cfg.eval.curve_episodes);
    let generated = generate_eval_channels(&dm, &env, es, episodes)?;
    let p = run.path(EVAL_CHANNELS_FILE);
    save_eval_channels(&p, &generated)?;
    let target = target_return(cfg, &buf, &fewshot);
    let ce = cfg.eval.curve_episodes;
    let csi = CsiMode::Generated(&generated);

    let zero_shot = mean_rate(&evaluate_dt(&dt, &env, es, cfg.eval.episodes, target, csi)?);
    run.metrics.push(0, "zero_shot_mean_rate", zero_shot)?;
    run.metrics.push(0, "target_return", target)?;

    let mut curve = Vec::new();
    let mut scratch = DecisionTransformer::new(
        cfg.dt.clone(),
        buf.state_dim(),
        buf.n,
        buf.horizon,
        derive_seed(seed, 0),
    )?;
    if fewshot.is_empty() {
        std::fs::copy(&dt_path, run.path(FINETUNED_FILE))?;
    } else {
        scratch.fit_scales(&fewshot, cfg.diffusion.norm_scale);
        let lr = cfg.train.dt_lr * cfg.train.finetune_lr_factor;
        let point = |name: &str, model: &DecisionTransformer, step: usize| -> Result<CurvePoint> {
            Ok(CurvePoint {
                model: name.into(),
                step: step as u64,
                mean_rate: mean_rate(&evaluate_dt(model, &env, es, ce, target, csi)?),
            })
        };
        // Both models advance in lockstep so the metrics log stays step-ordered.
        let mut opts = [
            dt_optimizer(&dt, lr, cfg),
            dt_optimizer(&scratch, cfg.train.scratch_lr, cfg),
        ];
        let mut runs = [
            (
                "finetuned",
                &mut dt,
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            ),
            (
                "scratch",
                &mut scratch,
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)),
            ),
        ];
        for (name, model, _) in runs.iter() {
            curve.push(point(name, model, 0)?);
        }
        for step in 1..=cfg.train.finetune_iters {
            for ((name, model, rng), opt) in runs.iter_mut().zip(opts.iter_mut()) {
                let loss = dt_train_step(model, opt, &fewshot, cfg.train.dt_batch, rng)?;
                if step == 1 || step % cfg.train.log_every == 0 || step == cfg.train.finetune_iters
                {
                    run.metrics
                        .push(step as u64, &format!("{name}_loss"), loss)?;
                }
                if step % cfg.train.curve_every == 0 || step == cfg.train.finetune_iters {
                    curve.push(point(name, model, step)?);
                }
            }
        }
        let p = run.path(FINETUNED_FILE);
        dt.save(p)?;
    }
    let p = run.path(SCRATCH_FILE);
    scratch.save(p)?;
    let p = run.path(CURVE_FILE);
    write_rows(p, &curve)?;
    let last = cfg.train.finetune_iters as u64;
    let fine = mean_rate(&evaluate_dt(&dt, &env, es, cfg.eval.episodes, target, csi)?);
    run.metrics.push(last, "finetuned_mean_rate", fine)?;
    run.finish(cfg, METRICS_FILE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub variant: String,
    pub episode: usize,
    pub mean_rate: f64,
    pub episode_return: f64,
}

/// Evaluates one variant on the held-out preset and writes its rate CSV,
/// plus the channel histograms and a copy of the learning curves.
pub fn cmd_eval(cfg: &ExperimentConfig, variant: Variant) -> Result<StageReport> {
    let mut run = StageRun::start(cfg, Stage::Eval)?;
    run.metrics.stage = format!("eval-{variant}");
    let env = cfg.held_out_env()?;
    let es = eval_seed(cfg);
    let n_ep = cfg.eval.episodes;
    let (buf, fewshot) = load_buffers(cfg)?;
    let target = target_return(cfg, &buf, &fewshot);
    let ft = stage_dir(cfg, Stage::Finetune);
    let generated = || load_eval_channels(&input_file(cfg, Stage::Finetune, EVAL_CHANNELS_FILE)?);

    let records = match variant {
        Variant::Random | Variant::Expert => evaluate_baseline(variant, cfg, &env, es, n_ep)?,
        Variant::DtPc => {
            let dt = DecisionTransformer::load(input_file(cfg, Stage::Finetune, FINETUNED_FILE)?)?;
            evaluate_dt(&dt, &env, es, n_ep, target, CsiMode::Perfect)?
        }
        Variant::D2t | Variant::ScratchDt => {
            let file = if variant == Variant::D2t {
                FINETUNED_FILE
            } else {
                SCRATCH_FILE
            };
            let dt = DecisionTransformer::load(input_file(cfg, Stage::Finetune, file)?)?;
            let gen = generated()?;
            let recs = evaluate_dt(&dt, &env, es, n_ep, target, CsiMode::Generated(&gen))?;
            if variant == Variant::D2t {
                let truth: Vec<Vec<f64>> = eval_channel_stream(&env, es, n_ep)?
                    .into_iter()
                    .flat_map(|(hs, _)| hs.into_iter().map(|h| channel_to_vector(&h)))
                    .collect();
                let gen_flat: Vec<Vec<f64>> = gen.iter().take(n_ep).flatten().cloned().collect();
                let p = run.path("channel_hist.csv");
                write_rows(
                    p,
                    &channel_histograms(&truth, &gen_flat, cfg.eval.hist_bins),
                )?;
                let ks: Vec<f64> = (0..truth[0].len())
                    .map(|c| {
                        let a: Vec<f64> = truth.iter().map(|v| v[c]).collect();
                        let b: Vec<f64> = gen_flat.iter().map(|v| v[c]).collect();
                        ks_statistic(&a, &b)
                    })
                    .collect();
                run.metrics
                    .push(0, "ks_max", ks.iter().copied().fold(0.0, f64::max))?;
                run.metrics
                    .push(0, "ks_mean", ks.iter().sum::<f64>() / ks.len() as f64)?;
            }
            recs
        }
    };
    let rows: Vec<RateRow> = records
        .iter()
        .enumerate()
        .map(|(e, r)| RateRow {
            variant: variant.name().into(),
            episode: e,
            mean_rate: r.mean_rate(),
            episode_return: r.rewards.iter().sum(),
        })
        .collect();
    let p = run.path(&format!("rates_{variant}.csv"));
    write_rows(p, &rows)?;
    run.metrics.push(0, "mean_rate", mean_rate(&records))?;
    let curve_src = ft.join(CURVE_FILE);
    if curve_src.exists() {
        let p = run.path(CURVE_FILE);
        std::fs::copy(curve_src, p)?;
    }
    run.finish(cfg, &format!("metrics_{variant}.csv"))
}

/// Every enabled stage in order; eval runs all variants.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<StageReport>> {
    let s = &cfg.stages;
    let mut out = Vec::new();
    if s.collect {
        out.push(cmd_collect(cfg)?);
    }
    if s.train_dm {
        out.push(cmd_train_dm(cfg)?);
    }
    if s.pretrain_dt {
        out.push(cmd_pretrain_dt(cfg)?);
    }
    if s.finetune {
        out.push(cmd_finetune(cfg)?);
    }
    if s.eval {
        for v in Variant::ALL {
            out.push(cmd_eval(cfg, v)?);
        }
    }
    Ok(out)
}

/// Human-readable plan for `--dry-run`: stage directories and inputs.
pub fn plan(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let mut s = String::new();
    for st in Stage::ALL {
        s.push_str(&format!(
            "{:<12} {}\n",
            st.name(),
            stage_dir(cfg, st).display()
        ));
    }
    Ok(s)
}
