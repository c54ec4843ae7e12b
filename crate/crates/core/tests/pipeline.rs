mod common;

use common::*;
use ovor::harness::{aggregate, build_backbone, run_with, Encoder, Learner, RunConfig, Split, Task, TaskStream};
use ovor::head::TaskHead;
use ovor::kernel::{Precision, Tensor};

#[test]
fn same_seed_same_manifest_bytes() {
    let cfg = quick();
    let a = run(&cfg, 3).manifest.to_json();
    let b = run(&cfg, 3).manifest.to_json();
    assert_eq!(a, b);
    assert_ne!(a, run(&cfg, 4).manifest.to_json());
}

#[test]
fn zero_fraction_equals_disabled_regularizer() {
    let zero = config(r#"{"preset": "fig1", "epochs": 5, "reg_fraction": 0.0}"#);
    let off = config(r#"{"preset": "fig1", "epochs": 5, "regularizer": false}"#);
    let a = run(&zero, 1).manifest;
    let b = run(&off, 1).manifest;
    assert!(a.outlier_checksums.iter().all(Option::is_none));
    assert_eq!(without_config(&a), without_config(&b));
}

#[test]
fn past_training_data_is_never_read() {
    let cfg = quick();
    let clean = run(&cfg, 2).manifest;
    let stream = stream(&cfg, 2);
    let poisoned = run_with(&cfg, &stream, 2, build_backbone(&cfg).unwrap(), |t, s| {
        for task in &mut s.tasks[..=t] {
            task.train.inputs.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
            task.train.labels.iter_mut().for_each(|l| *l = usize::MAX);
        }
    })
    .unwrap()
    .manifest;
    assert_eq!(clean.to_json(), poisoned.to_json());
}

#[test]
fn backbone_and_old_heads_stay_frozen() {
    let cfg = quick();
    let out = run(&cfg, 0);
    let bb = build_backbone(&cfg).unwrap().unwrap();
    assert_eq!(out.learner.encoder().backbone().unwrap().checksum(), bb.checksum());
    for (t, sum) in out.manifest.head_checksums.iter().enumerate() {
        assert_eq!(
            &format!("{:016x}", out.learner.heads().head(t).unwrap().checksum()),
            sum
        );
    }
    assert!(out
        .manifest
        .reports
        .iter()
        .all(|r| r.outliers == 320 && r.head_only_steps > 0));
}

#[test]
fn single_task_has_no_forgetting() {
    let cfg = config(
        r#"{"preset": "fig1", "epochs": 5, "seeds": [0, 1],
            "data": {"tasks": 1}}"#,
    );
    let ms = manifests(&cfg);
    for m in &ms {
        assert_eq!(m.tasks, 1);
        assert_eq!(m.average_forgetting, vec![None]);
        assert!(m.prompt_cosine.is_empty() && m.task_given_drift.is_empty());
        assert_eq!(m.cross_task_errors, vec![0]);
    }
    let agg = aggregate(&ms).unwrap();
    assert!(agg.final_forgetting.is_none());
    assert_eq!(agg.seeds, vec![0, 1]);
}

#[test]
fn separated_identity_tasks_are_learned() {
    let cfg = config(
        r#"{"mode": "identity", "regularizer": false, "epochs": 30, "batch_size": 32,
            "optimizer": {"lr": 0.05},
            "data": {"kind": "synthetic", "tasks": 3, "classes_per_task": 2, "dim": 4,
                     "radius": 40.0, "class_std": 1.0, "train_per_class": 60, "test_per_class": 60}}"#,
    );
    let m = run(&cfg, 0).manifest;
    for (i, &acc) in m.task_given.last().unwrap().iter().enumerate() {
        assert!(acc >= 0.99, "task {i}: task-given accuracy {acc}");
    }
}

fn blob_stream() -> TaskStream {
    // class c sits at 10·e_c in 4 dimensions
    let split = |per: usize| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for k in 0..per {
                let mut r = vec![0.01 * k as f64; 4];
                r[c] += 10.0;
                rows.push(r);
                labels.push(c);
            }
        }
        Split::new(Tensor::from_rows(&rows).unwrap(), labels).unwrap()
    };
    TaskStream::from_labeled(&split(5), &split(5), &[0, 1, 2, 3], 2).unwrap()
}

fn identity_cfg() -> RunConfig {
    config(r#"{"mode": "identity", "regularizer": false}"#)
}

#[test]
fn hand_heads_give_perfect_and_chance_accuracy() {
    let stream = blob_stream();
    let head = |t: usize, w: Tensor| TaskHead::from_parts(t, w, Tensor::zeros(&[2])).unwrap();
    let rows = |a: usize, b: usize| {
        let mut w = Tensor::zeros(&[2, 4]);
        w.row_mut(0)[a] = 1.0;
        w.row_mut(1)[b] = 1.0;
        w
    };
    let perfect = Learner::from_parts(
        &identity_cfg(),
        Encoder::Identity,
        vec![head(0, rows(0, 1)), head(1, rows(2, 3))],
    )
    .unwrap();
    let ev = perfect.evaluate(&stream.tasks).unwrap();
    assert_eq!(ev.accuracy, vec![1.0, 1.0]);
    assert_eq!(ev.task_given, vec![1.0, 1.0]);
    assert_eq!(ev.cross_task_errors(), 0);

    let zero = Learner::from_parts(
        &identity_cfg(),
        Encoder::Identity,
        vec![head(0, Tensor::zeros(&[2, 4])), head(1, Tensor::zeros(&[2, 4]))],
    )
    .unwrap();
    let ev = zero.evaluate(&stream.tasks).unwrap();
    // all ties resolve to global class 0: chance level over four balanced classes
    let overall = (ev.accuracy[0] + ev.accuracy[1]) / 2.0;
    assert_eq!(overall, 0.25);
    assert_eq!(ev.confusion[1], vec![10, 0]);
}

#[test]
fn evaluation_rejects_untrained_tasks() {
    let stream = blob_stream();
    let one = Learner::from_parts(
        &identity_cfg(),
        Encoder::Identity,
        vec![TaskHead::from_parts(0, Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])).unwrap()],
    )
    .unwrap();
    assert!(one.evaluate(&stream.tasks).is_err());
    let wrong = Task {
        id: 1,
        ..stream.tasks[1].clone()
    };
    let mut fresh = Learner::new(&identity_cfg(), None, 0).unwrap();
    assert!(fresh.train_task(&wrong).is_err());
}

#[test]
fn single_precision_values_are_representable() {
    let cfg = config(r#"{"preset": "fig1", "epochs": 5, "precision": "f32"}"#);
    assert_eq!(cfg.precision, Precision::F32);
    let out = run(&cfg, 0);
    let f32_exact = |t: &Tensor| t.data().iter().all(|&v| (v as f32) as f64 == v);
    for p in out.learner.prompt_snapshots() {
        assert!(p.tensors().into_iter().all(f32_exact));
    }
    for h in out.learner.heads().heads() {
        assert!(f32_exact(&h.weight) && f32_exact(&h.bias));
    }
    assert!(f32_exact(&out.learner.last_outliers().unwrap().points));
    let acc = out.manifest.final_accuracy();
    let acc64 = run(&quick(), 0).manifest.final_accuracy();
    assert!((acc - acc64).abs() < 0.05, "f32 {acc} vs f64 {acc64}");
    assert_eq!(out.manifest.to_json(), run(&cfg, 0).manifest.to_json());
}

#[test]
fn outliers_lie_outside_their_features() {
    let cfg = quick();
    let stream = stream(&cfg, 0);
    let mut learner = Learner::new(&cfg, build_backbone(&cfg).unwrap(), 0).unwrap();
    learner.train_task(&stream.tasks[0]).unwrap();
    let z = learner.features(&stream.tasks[0].train.inputs).unwrap();
    let out = learner.last_outliers().unwrap();
    let k = cfg.npos.k;
    let inner = mean((0..z.rows()).map(|i| ovor::npos::knn_distance_member(&z, i, k).unwrap()));
    let outer = mean((0..out.len()).map(|i| ovor::npos::knn_distance(out.points.row(i), &z, k).unwrap()));
    assert!(outer > inner, "outliers {outer} vs features {inner}");
}
