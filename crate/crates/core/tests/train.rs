use std::collections::{BTreeMap, HashSet};

use stan_core::baseline::CnnConfig;
use stan_core::manifest::Manifest;
use stan_core::model::{AnyModel, ModelConfig, ModelKind, Params, StanConfig};
use stan_core::saliency::{ExplainConfig, Method, SmoothGradParams};
use stan_core::synth::{write_dataset, SynthConfig};
use stan_core::train::*;
use stan_core::views::View;
use stan_core::Tensor;

fn scalar_params(rank2: bool) -> Params<f64> {
    let mut p = Params::default();
    let shape = if rank2 { vec![1, 1] } else { vec![1] };
    p.add("w", Tensor::new(shape, vec![1.0]).unwrap());
    p
}

#[test]
fn adamw_follows_the_two_step_recurrence() {
    // Frozen from an independent scalar recurrence, lr 0.1, grads 0.5 then -1.
    let expect = [
        (false, [0.900000002, 0.9366103542405654]),
        (true, [0.895000002, 0.9271353542305654]),
    ];
    for (rank2, want) in expect {
        let mut p = scalar_params(rank2);
        let mut st = AdamState::new(&p);
        let opt = AdamW::default();
        for (g, w) in [0.5, -1.0].into_iter().zip(want) {
            let shape = p.get(0).shape().to_vec();
            adamw_step(&mut p, &[Tensor::new(shape, vec![g]).unwrap()], &mut st, &opt, 0.1);
            assert!((p.get(0).data()[0] - w).abs() < 1e-10, "rank2 {rank2}: {} vs {w}", p.get(0).data()[0]);
        }
        assert_eq!(st.step, 2);
    }
}

#[test]
fn adamw_with_zero_gradients_and_no_decay_is_a_no_op() {
    let mut p = scalar_params(true);
    let mut st = AdamState::new(&p);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    for _ in 0..3 {
        adamw_step(&mut p, &[Tensor::new(vec![1, 1], vec![0.0]).unwrap()], &mut st, &opt, 0.5);
    }
    assert_eq!(p.get(0).data(), &[1.0]);
}

#[test]
fn cosine_schedule_shape() {
    let s = CosineSchedule {
        base: 1e-3,
        warmup: 2.0,
        total: 10.0,
    };
    assert_eq!(s.at(0.0), 0.0);
    assert!((s.at(1.0) - 5e-4).abs() < 1e-15);
    assert!((s.at(2.0) - 1e-3).abs() < 1e-15);
    assert!((s.at(6.0) - 5e-4).abs() < 1e-15);
    assert_eq!(s.at(10.0), 0.0);
    assert!(s.at(9.999) < 1e-9);
}

#[test]
fn gradient_clipping_rescales_to_max_norm() {
    let mut g = vec![Tensor::new(vec![1], vec![3.0f64]).unwrap(), Tensor::new(vec![1], vec![4.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    assert_eq!(clip_grad_norm(&mut g, 2.0), 1.0);
    assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn f1_hand_values() {
    let p = [true, true, true, false, false];
    let l = [true, true, false, true, false];
    assert!((f1(&p, &l) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(f1(&[false, false], &[false, false]), 0.0);
    assert_eq!(f1(&[true, false], &[true, false]), 1.0);
    assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
}

fn manifest(per_class: usize, classes: usize) -> Manifest {
    let cfg = SynthConfig {
        num_classes: classes,
        clips_per_class: per_class,
        ..SynthConfig::default()
    };
    stan_core::synth::manifest_for(&cfg, &stan_core::synth::generate(&cfg).unwrap())
}

#[test]
fn kfold_is_stratified_and_seeded() {
    let m = manifest(50, 4);
    let plan = kfold(&m, 10, 3).unwrap();
    assert_eq!(plan.num_folds, 10);
    for f in 0..10 {
        let test = plan.test_indices(f);
        assert_eq!(test.len(), 20);
        for c in 0..4 {
            assert_eq!(test.iter().filter(|&&i| m.clips[i].label == c).count(), 5);
        }
        assert_eq!(plan.train_indices(f).len(), 180);
    }
    assert_eq!(kfold(&m, 10, 3).unwrap(), plan);
    assert_ne!(kfold(&m, 10, 4).unwrap(), plan);
    assert!(kfold(&m, 1, 0).is_err());
    let json = serde_json::to_string(&SplitSpec::default()).unwrap();
    assert_eq!(json, r#"{"kind":"k-fold","k":5,"seed":0}"#);
}

#[test]
fn leave_one_group_out_holds_out_each_group_once() {
    let m = manifest(50, 4);
    let plan = leave_one_group_out(&m).unwrap();
    assert_eq!(plan.num_folds, 15);
    let mut seen = HashSet::new();
    for f in 0..15 {
        let test = plan.test_indices(f);
        let groups: HashSet<usize> = test.iter().map(|&i| m.clips[i].group).collect();
        assert_eq!(groups.len(), 1);
        assert!(seen.insert(*groups.iter().next().unwrap()));
        assert!(plan.train_indices(f).iter().all(|&i| !groups.contains(&m.clips[i].group)));
    }
}

fn small_grid(dir: &std::path::Path) -> (Manifest, GridConfig) {
    let cfg = SynthConfig {
        num_classes: 2,
        clips_per_class: 5,
        groups: 3,
        ..SynthConfig::default()
    };
    let m = write_dataset(&cfg, dir).unwrap();
    let grid = GridConfig {
        models: vec![ModelKind::Stan, ModelKind::Cnn],
        views: vec![View::GlobalLocal],
        methods: vec![Method::Vanilla, Method::SmoothGrad],
        split: SplitSpec::KFold { k: 2, seed: 0 },
        train: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        },
        explain: ExplainConfig {
            smoothgrad: SmoothGradParams {
                n_samples: 2,
                ..Default::default()
            },
            ..Default::default()
        },
    };
    (m, grid)
}

#[test]
fn grid_report_is_recomputable_from_raw_records() {
    let dir = tempfile::tempdir().unwrap();
    let (m, grid) = small_grid(dir.path());
    let out = run_experiment_grid(&m, dir.path(), &grid).unwrap();
    assert_eq!(out.report.cells.len(), 2);
    assert_eq!(out.video.len(), 20);
    assert_eq!(out.frames.len(), 2 * 2 * 10 * 20);
    assert_eq!(out.logs.len(), 4);

    let video: Vec<VideoRecord> = from_csv(&to_csv(&out.video).unwrap()).unwrap();
    let frames: Vec<FrameRecord> = from_csv(&to_csv(&out.frames).unwrap()).unwrap();
    assert_eq!(video, out.video);
    assert_eq!(frames, out.frames);

    for cell in &out.report.cells {
        assert!(cell.folds.iter().all(|f| f.overlap == 0 && f.train_clips + f.test_clips == 10));
        let rows: Vec<&VideoRecord> = video.iter().filter(|r| r.model == cell.model).collect();
        let correct = rows.iter().filter(|r| r.label == r.predicted).count();
        assert_eq!(cell.video.overall, correct as f64 / rows.len() as f64);

        for m in &cell.frames {
            let rows: Vec<&FrameRecord> = frames
                .iter()
                .filter(|r| r.model == cell.model && r.method == m.method)
                .collect();
            let mut c = BTreeMap::new();
            for r in &rows {
                assert_eq!(r.predicted, r.score > r.threshold);
                *c.entry((r.predicted, r.important)).or_insert(0usize) += 1;
            }
            let get = |k| *c.get(&k).unwrap_or(&0) as f64;
            let (tp, fp, fnn) = (get((true, true)), get((true, false)), get((false, true)));
            let want = if tp + fp + fnn == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
            assert!((m.f1.overall - want).abs() < 1e-12);
            let pos = tp + fnn;
            let ap = 2.0 * pos / (2.0 * pos + rows.len() as f64 - pos);
            assert!((m.always_positive - ap).abs() < 1e-12);
            assert_eq!(m.thresholds.len(), 2);
        }
    }
    let back = MetricsReport::from_json(&out.report.to_json()).unwrap();
    assert_eq!(back, out.report);
    assert!(render_tables(&[back]).contains("global-local"));
}

#[test]
fn grid_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (m, mut grid) = small_grid(dir.path());
    grid.models = vec![ModelKind::Stan];
    let a = run_experiment_grid(&m, dir.path(), &grid).unwrap();
    let b = run_experiment_grid(&m, dir.path(), &grid).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(to_csv(&a.frames).unwrap(), to_csv(&b.frames).unwrap());
}

#[test]
fn both_models_overfit_ten_clips() {
    let cfg = SynthConfig {
        num_classes: 2,
        clips_per_class: 5,
        ..SynthConfig::default()
    };
    let clips = stan_core::synth::generate(&cfg).unwrap();
    let inputs: Vec<Tensor<f32>> = clips.iter().map(|c| c.clip.clone()).collect();
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let configs = [
        ModelConfig::Stan(StanConfig::desk(2, 20)),
        ModelConfig::Cnn(CnnConfig::desk(2, 20)),
    ];
    for config in configs {
        let mut model = AnyModel::<f32>::build(&config, 0).unwrap();
        let tc = TrainConfig {
            model: config.kind(),
            view: View::Global,
            epochs: 40,
            ..TrainConfig::default()
        };
        let log = train_model(&mut model, &inputs, &labels, &tc).unwrap();
        assert!(log.final_loss() < 0.05, "{}: {:?}", config.kind(), log.epochs.last());
    }
}

#[test]
fn config_validation_rejects_bad_settings() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { epochs: 0, ..ok.clone() },
        TrainConfig { warmup_epochs: 40, ..ok.clone() },
        TrainConfig { learning_rate: -1.0, ..ok.clone() },
        TrainConfig { stan_frames: 7, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(stan_core::Error::Config(_))));
    }
    let text = r#"{"epochs": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(text).is_err());
}
