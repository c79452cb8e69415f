use std::path::{Path, PathBuf};

use d2t::config::ExperimentConfig;
use d2t::diffusion::DiffusionModel;
use d2t::dt::DecisionTransformer;
use d2t::metrics::{read_rows, HistogramRow, MetricsLog, MetricsRecord, METRICS_HEADER};
use d2t::pipeline::*;
use d2t::trajectory::TrajectoryBuffer;

fn tiny(out: &Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let mut cfg = ExperimentConfig::load(path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn value(records: &[MetricsRecord], metric: &str) -> f64 {
    records
        .iter()
        .rev()
        .find(|r| r.metric == metric)
        .unwrap()
        .value
}

fn read(dir: &Path, file: &str) -> Vec<MetricsRecord> {
    MetricsLog::read_csv(dir.join(file)).unwrap()
}

#[test]
fn collect_is_reproducible_and_summarized() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let report = cmd_collect(&cfg).unwrap();
    let bytes = std::fs::read(report.dir.join(BUFFER_FILE)).unwrap();
    let again = cmd_collect(&cfg).unwrap();
    assert_eq!(std::fs::read(again.dir.join(BUFFER_FILE)).unwrap(), bytes);

    let buf = TrajectoryBuffer::from_bytes(&bytes).unwrap();
    assert_eq!(buf.env_ids(), vec![0, 1, 2]);
    assert_eq!(buf.len(), 3 * cfg.expert.episodes_per_env);
    let m = read(&report.dir, METRICS_FILE);
    let all: Vec<f64> = buf
        .trajectories()
        .iter()
        .flat_map(|t| t.rewards.iter().copied())
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((value(&m, "mean_reward") - mean).abs() < 1e-12);
    for (i, p) in cfg.presets.iter().enumerate() {
        let r: Vec<f64> = buf
            .trajectories()
            .iter()
            .filter(|t| t.env_id == i as u32)
            .flat_map(|t| t.rewards.clone())
            .collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!((value(&m, &format!("mean_reward_{}", p.name)) - mean).abs() < 1e-12);
    }
}

#[test]
fn metrics_files_have_the_fixed_header() {
    let tmp = tempfile::tempdir().unwrap();
    let report = cmd_collect(&tiny(tmp.path())).unwrap();
    let text = std::fs::read_to_string(report.dir.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.dir.join("manifest.json")).unwrap())
            .unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert_eq!(
        files[BUFFER_FILE].as_str().unwrap(),
        sha256_file(report.dir.join(BUFFER_FILE)).unwrap()
    );
}

#[test]
fn stage_directories_follow_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(tmp.path());
    let mut b = a.clone();
    b.dt.width = 16;
    assert_eq!(stage_dir(&a, Stage::Collect), stage_dir(&b, Stage::Collect));
    assert_eq!(stage_dir(&a, Stage::TrainDm), stage_dir(&b, Stage::TrainDm));
    assert_ne!(
        stage_dir(&a, Stage::PretrainDt),
        stage_dir(&b, Stage::PretrainDt)
    );
    assert_ne!(
        stage_dir(&a, Stage::Finetune),
        stage_dir(&b, Stage::Finetune)
    );
    let mut c = a.clone();
    c.seed += 1;
    assert_ne!(stage_dir(&a, Stage::Collect), stage_dir(&c, Stage::Collect));
}

#[test]
fn stages_refuse_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let err = cmd_train_dm(&cfg).unwrap_err().to_string();
    assert!(err.contains("collect"), "{err}");
    cmd_collect(&cfg).unwrap();
    assert!(cmd_finetune(&cfg).is_err());
}

#[test]
fn plan_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("out"));
    let plan = plan(&cfg).unwrap();
    assert_eq!(plan.lines().count(), 5);
    for s in Stage::ALL {
        assert!(plan.contains(&stage_dir(&cfg, s).display().to_string()));
    }
    assert!(!cfg.out_dir.exists());
}

#[test]
fn training_stages_reduce_loss_and_checkpoints_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.train.dm_iters = 300;
    cfg.train.dt_iters = 300;
    cfg.train.log_every = 50;
    cfg.train.dm_lr = 1e-3;
    cfg.train.dt_lr = 1e-3;
    cmd_collect(&cfg).unwrap();

    let dm = cmd_train_dm(&cfg).unwrap();
    let loss = dm.metrics.series("loss_avg");
    assert!(loss.last().unwrap().1 < loss[0].1, "{loss:?}");
    let path = dm.dir.join(DM_FILE);
    let model = DiffusionModel::load(&path).unwrap();
    assert_eq!(model.schedule.steps(), 20);
    let copy = tmp.path().join("dm_copy.ckpt");
    model.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());

    let dt = cmd_pretrain_dt(&cfg).unwrap();
    let loss = dt.metrics.series("loss_avg");
    assert!(loss.last().unwrap().1 < loss[0].1, "{loss:?}");
    let path = dt.dir.join(DT_FILE);
    let copy = tmp.path().join("dt_copy.ckpt");
    DecisionTransformer::load(&path)
        .unwrap()
        .save(&copy)
        .unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());

    let before = std::fs::read(&path).unwrap();
    cmd_pretrain_dt(&cfg).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn empty_fewshot_keeps_the_pretrained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.expert.fewshot_episodes = 0;
    cmd_collect(&cfg).unwrap();
    cmd_train_dm(&cfg).unwrap();
    let dt = cmd_pretrain_dt(&cfg).unwrap();
    let ft = cmd_finetune(&cfg).unwrap();
    assert_eq!(
        std::fs::read(ft.dir.join(FINETUNED_FILE)).unwrap(),
        std::fs::read(dt.dir.join(DT_FILE)).unwrap()
    );
}

#[test]
fn finetune_records_zero_shot_first() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let reports = run_all(&cfg).unwrap();
    let ft: Vec<_> = reports
        .iter()
        .filter(|r| r.stage == Stage::Finetune)
        .collect();
    assert_eq!(ft.len(), 1);
    for r in ft {
        let recs = r.metrics.records();
        assert_eq!(recs[0].metric, "zero_shot_mean_rate");
        assert_eq!(recs[0].step, 0);
        let last = recs.last().unwrap();
        assert_eq!(
            (last.metric.as_str(), last.step),
            ("finetuned_mean_rate", cfg.train.finetune_iters as u64)
        );
        let curve: Vec<CurvePoint> = read_rows(r.dir.join(CURVE_FILE)).unwrap();
        let expected = 2 * (cfg.train.finetune_iters / cfg.train.curve_every + 1);
        assert_eq!(curve.len(), expected);
    }
}

#[test]
fn eval_outputs_and_orderings() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.eval.episodes = 12;
    run_all(&cfg).unwrap();
    let dir = stage_dir(&cfg, Stage::Eval);
    let rate = |v: Variant| value(&read(&dir, &format!("metrics_{v}.csv")), "mean_rate");
    assert!(rate(Variant::Expert) >= rate(Variant::Random));

    let rows: Vec<RateRow> = read_rows(dir.join("rates_expert.csv")).unwrap();
    assert_eq!(rows.len(), cfg.eval.episodes);
    let mean = rows.iter().map(|r| r.mean_rate).sum::<f64>() / rows.len() as f64;
    assert!((mean - rate(Variant::Expert)).abs() < 1e-12);

    let hist: Vec<HistogramRow> = read_rows(dir.join("channel_hist.csv")).unwrap();
    let dim = 2 * cfg.env.n * cfg.env.m;
    assert_eq!(hist.len(), dim * cfg.eval.hist_bins);
    let samples = (cfg.eval.episodes * cfg.env.episode_len) as u64;
    for c in 0..dim {
        let (t, g) = hist
            .iter()
            .filter(|h| h.coordinate == c)
            .fold((0, 0), |(a, b), h| {
                (a + h.true_count, b + h.generated_count)
            });
        assert_eq!((t, g), (samples, samples));
    }
    let curve: Vec<CurvePoint> = read_rows(dir.join(CURVE_FILE)).unwrap();
    assert!(
        curve.iter().any(|p| p.model == "scratch") && curve.iter().any(|p| p.model == "finetuned")
    );
}
