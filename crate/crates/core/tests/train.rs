use geotdm::checkpoint::{fresh_model, Checkpoint, ModelMeta};
use geotdm::diffusion::{NoiseSchedule, ScheduleConfig};
use geotdm::egtn::{EgtnConfig, EgtnModel};
use geotdm::sim::{generate_split, DatasetManifest, SystemKind, SystemSpec};
use geotdm::train::{evaluate_loss, train_run, EarlyStopper, Mode, RunPaths, TrainConfig, TrainData};

const COND: usize = 3;
const TARGET: usize = 5;

fn data(count: usize, split: usize) -> Vec<geotdm::geom::GeoTrajectory<f32>> {
    let spec = SystemSpec { n_bodies: 3, ..SystemSpec::default_for(SystemKind::Spring) };
    let man = DatasetManifest {
        train: count,
        valid: count,
        test: count,
        total_frames: COND + TARGET,
        cond_frames: COND,
        target_frames: TARGET,
        seed: 3,
    };
    generate_split(&spec, &man, split, count).unwrap()
}

fn setup(mode: Mode) -> (ModelMeta, EgtnModel<f32>, NoiseSchedule) {
    let cond = mode == Mode::Cond;
    let cfg = EgtnConfig {
        n_layers: 1,
        hidden_dim: 16,
        time_emb_dim: 8,
        use_cross_attention: cond,
        prior_frames: cond.then_some(TARGET),
        ..EgtnConfig::default()
    };
    let schedule = ScheduleConfig { n_steps: 50, beta_start: 1e-3, beta_end: 0.35 };
    let meta = ModelMeta {
        mode,
        dim: 3,
        frames: TARGET,
        cond_frames: if cond { COND } else { 0 },
        tail_frames: 0,
        model: cfg.clone(),
        schedule: schedule.clone(),
    };
    (meta, fresh_model(&cfg, 1).unwrap(), schedule.build().unwrap())
}

fn config(mode: Mode, steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 10,
        max_epochs: 100_000,
        seed: 17,
        mode,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

#[test]
fn ten_sample_run_overfits() {
    let (meta, mut model, schedule) = setup(Mode::Cond);
    let train = TrainData::from_trajectories(&data(10, 0), Mode::Cond, COND, TARGET).unwrap();
    let report = train_run(&config(Mode::Cond, 500), &meta, &mut model, &schedule, &train, None, None).unwrap();
    assert_eq!(report.steps, 500);
    let (first, last) = (report.train_losses[0], report.train_losses[499]);
    eprintln!("step 1 loss {first:.4}, step 500 loss {last:.4}");
    assert!(last < 0.25 * first, "step 1 {first}, step 500 {last}");
}

#[test]
fn equal_seeds_give_identical_runs() {
    let train = TrainData::from_trajectories(&data(12, 0), Mode::Uncond, COND, TARGET).unwrap();
    let valid = TrainData::from_trajectories(&data(6, 1), Mode::Uncond, COND, TARGET).unwrap();
    let run = || {
        let (meta, mut model, schedule) = setup(Mode::Uncond);
        let cfg = TrainConfig { validation_interval: 2, max_epochs: 6, max_steps: None, batch_size: 4, ..config(Mode::Uncond, 0) };
        let report = train_run(&cfg, &meta, &mut model, &schedule, &train, Some(&valid), None).unwrap();
        (report, model.params)
    };
    let (ra, pa) = run();
    let (rb, pb) = run();
    assert_eq!(ra, rb);
    assert_eq!(pa, pb);
    assert_eq!(ra.steps, 18);
    assert_eq!(ra.valid_losses.len(), 3);
}

#[test]
fn validation_leaves_parameters_alone() {
    let (_, mut model, schedule) = setup(Mode::Cond);
    model.randomize(0.1, 4);
    let before = model.params.clone();
    let valid = TrainData::from_trajectories(&data(6, 1), Mode::Cond, COND, TARGET).unwrap();
    let a = evaluate_loss(&model, Mode::Cond, &valid, &schedule, 4, 9).unwrap();
    let b = evaluate_loss(&model, Mode::Cond, &valid, &schedule, 4, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.params, before);
}

#[test]
fn early_stop_fires_after_exactly_patience_failures() {
    let mut s = EarlyStopper::new(3);
    let seq = [1.0, 0.9, 0.95, 0.91, 0.8, 0.85, 0.85, 0.81];
    let stops: Vec<bool> = seq.iter().map(|&l| s.observe(l).1).collect();
    assert_eq!(stops, [false, false, false, false, false, false, false, true]);
    assert_eq!(s.best, Some(0.8));
}

#[test]
fn training_writes_metrics_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());
    let (meta, mut model, schedule) = setup(Mode::Cond);
    let train = TrainData::from_trajectories(&data(8, 0), Mode::Cond, COND, TARGET).unwrap();
    let valid = TrainData::from_trajectories(&data(4, 1), Mode::Cond, COND, TARGET).unwrap();
    let cfg = TrainConfig { validation_interval: 1, max_epochs: 3, max_steps: None, batch_size: 4, ..config(Mode::Cond, 0) };
    let report = train_run(&cfg, &meta, &mut model, &schedule, &train, Some(&valid), Some(&paths)).unwrap();
    let lines = std::fs::read_to_string(&paths.metrics).unwrap();
    let records: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), report.steps as usize + report.valid_losses.len());
    assert!(records.iter().all(|r| r["train_loss"].is_number() && r["step"].is_u64()));
    let ck = Checkpoint::load(&paths.checkpoint).unwrap();
    assert_eq!(ck.meta, meta);
    assert_eq!(ck.params, model.params, "the model ends on the best-validation parameters");
    assert!(ck.optimizer.is_some_and(|o| o.step > 0));
}

#[test]
fn bad_configs_are_rejected() {
    let (meta, mut model, schedule) = setup(Mode::Uncond);
    let train = TrainData::from_trajectories(&data(2, 0), Mode::Uncond, COND, TARGET).unwrap();
    for bad in [
        TrainConfig { learning_rate: 0.0, ..config(Mode::Uncond, 1) },
        TrainConfig { batch_size: 0, ..config(Mode::Uncond, 1) },
    ] {
        assert!(train_run(&bad, &meta, &mut model, &schedule, &train, None, None).is_err());
    }
    let empty = TrainData::default();
    assert!(train_run(&config(Mode::Uncond, 1), &meta, &mut model, &schedule, &empty, None, None).is_err());
}
