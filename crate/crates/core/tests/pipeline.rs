use proptest::prelude::*;

use synthcurate::channels::{lossy_world_preset, Channel, DiscreteChannel};
use synthcurate::config::ExperimentConfig;
use synthcurate::datamodel::{Label, View};
use synthcurate::models::{Classifier, TrainConfig};
use synthcurate::pipeline::{self, compute_metrics, Benchmark, InferenceContext, PipelineConfig};

fn quick(cfg: PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        teacher: TrainConfig { steps: 30, ..cfg.teacher.clone() },
        student: TrainConfig { steps: 30, ..cfg.student.clone() },
        ..cfg
    }
}

fn confusion_oracle(pred: &[u32], gold: &[u32], classes: u32, none: Option<u32>) -> (f64, f64, f64, f64) {
    let mut m = vec![vec![0u32; classes as usize]; classes as usize];
    for (p, g) in pred.iter().zip(gold) {
        m[*g as usize][*p as usize] += 1;
    }
    let pos = |k: u32| Some(k) != none;
    let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
    for k in (0..classes).filter(|&k| pos(k)) {
        let ku = k as usize;
        tp += m[ku][ku];
        fp += (0..classes as usize).filter(|&g| g != ku).map(|g| m[g][ku]).sum::<u32>();
        fneg += (0..classes as usize).filter(|&p| p != ku).map(|p| m[ku][p]).sum::<u32>();
    }
    let div = |a: u32, b: u32| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fneg);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let acc = div((0..classes as usize).map(|k| m[k][k]).sum(), pred.len() as u32);
    (acc, p, r, f)
}

proptest! {
    #[test]
    fn metrics_match_confusion_oracle(
        pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..200),
        none in proptest::option::of(0u32..4),
    ) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let gold: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let m = compute_metrics(
            &pred.iter().map(|&x| Label(x)).collect::<Vec<_>>(),
            &gold.iter().map(|&x| Label(x)).collect::<Vec<_>>(),
            none.map(Label),
        ).unwrap();
        let (a, p, r, f) = confusion_oracle(&pred, &gold, 4, none);
        prop_assert!((m.accuracy - a).abs() < 1e-12);
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - f).abs() < 1e-12);
    }
}

#[test]
fn clean_preset_is_learnable() {
    let cfg = ExperimentConfig { seed: Some(0), ..ExperimentConfig::default() };
    let bench = cfg.benchmark_with_seed(0).unwrap();
    let out = pipeline::run_pipeline(&bench, &cfg.pipeline_config().unwrap(), "full", &[]).unwrap();
    assert!(out.report.metrics.accuracy > 0.9, "{:?}", out.report.metrics);
}

#[test]
fn kept_views_never_score_worse_than_discarded() {
    for seed in 0..3 {
        let bench = Benchmark::from_preset(&lossy_world_preset("collapse-heavy").unwrap(), seed, 3, 1).unwrap();
        let cfg = quick(PipelineConfig { seed, ..Default::default() });
        let mut ds = bench.train.clone();
        let (_, traces, _) = pipeline::run_selection_rounds(&mut ds, &bench, &cfg).unwrap();
        for t in traces.iter().flat_map(|t| &t.instances) {
            let kept = t.selection.kept.iter().map(|&i| t.scores[i]).fold(f64::NEG_INFINITY, f64::max);
            let dropped = t.selection.discarded.iter().map(|&i| t.scores[i]).fold(f64::INFINITY, f64::min);
            assert!(kept <= dropped);
        }
        for inst in &ds {
            for s in inst.synthetic_pool.iter().filter(|s| s.is_v_side()) {
                assert_eq!(s.selected, s.kept_through == Some(cfg.rounds));
                assert!(s.teacher_loss.is_some());
            }
        }
    }
}

#[test]
fn single_view_student_trains() {
    let bench = Benchmark::from_preset(&lossy_world_preset("noisy").unwrap(), 1, 4, 3).unwrap();
    let cfg = quick(PipelineConfig { train_views: 1, infer_views: 1, ..Default::default() });
    let out = pipeline::run_pipeline(&bench, &cfg, "full", &[]).unwrap();
    assert_eq!(out.predictions.len(), bench.test.len());
}

#[test]
fn too_many_training_views_is_an_error() {
    let bench = Benchmark::from_preset(&lossy_world_preset("clean").unwrap(), 1, 2, 1).unwrap();
    let cfg =
        quick(PipelineConfig { rounds: 0, spawn: vec![], initial_views: 4, train_views: 5, ..Default::default() });
    let err = pipeline::run_pipeline(&bench, &cfg, "full", &[]).unwrap_err();
    assert!(matches!(err, pipeline::PipelineError::InsufficientViews { need: 5, .. }), "{err}");
}

#[test]
fn appended_real_view_changes_set_size() {
    let bench = Benchmark::from_preset(&lossy_world_preset("clean").unwrap(), 3, 3, 2).unwrap();
    let base = quick(PipelineConfig { infer_views: 1, ..Default::default() });
    let out = pipeline::run_pipeline(&bench, &base, "full", &[]).unwrap();
    let teachers: Vec<_> = out.traces.iter().filter_map(|t| t.teacher.as_ref()).collect();
    let inst = &bench.test[0];
    assert!(inst.paired_view.is_some());
    for (append, want) in [(false, 1), (true, 2)] {
        let cfg = PipelineConfig { append_real_view: append, ..base.clone() };
        let ctx = InferenceContext { bench: &bench, cfg: &cfg, teachers: teachers.clone(), embedder: None };
        let views = pipeline::inference_views(inst, &ctx).unwrap();
        assert_eq!(views.len(), want);
        if append {
            assert_eq!(views.last(), inst.paired_view.as_ref());
        }
    }
}

#[test]
fn full_chain_inference_runs() {
    let bench = Benchmark::from_preset(&lossy_world_preset("noisy").unwrap(), 3, 3, 2).unwrap();
    let cfg = quick(PipelineConfig { full_chain_inference: true, ..Default::default() });
    let out = pipeline::run_pipeline(&bench, &cfg, "full", &[]).unwrap();
    assert_eq!(out.predictions.len(), bench.test.len());
}

#[test]
fn identity_channels_reproduce_training_prediction() {
    let preset = lossy_world_preset("discrete").unwrap();
    let mut bench = Benchmark::from_preset(&preset, 4, 3, 1).unwrap();
    let alphabet = match bench.schema.u_spec {
        synthcurate::datamodel::ViewSpec::Discrete { alphabet } => alphabet,
        _ => unreachable!(),
    };
    bench.u_to_v = Channel::Discrete(DiscreteChannel::identity(alphabet));
    bench.v_to_u = Channel::Discrete(DiscreteChannel::identity(alphabet));
    bench.schema.v_spec = bench.schema.u_spec;
    let cfg = quick(PipelineConfig {
        rounds: 1,
        spawn: vec![1],
        initial_views: 5,
        train_views: 3,
        infer_views: 3,
        infer_pool: 5,
        ..Default::default()
    });
    let mut ds = bench.train.clone();
    let (_, traces, _) = pipeline::run_selection_rounds(&mut ds, &bench, &cfg).unwrap();
    let picks: Vec<Vec<usize>> = ds
        .iter()
        .map(|i| {
            let kept: Vec<usize> = (0..i.synthetic_pool.len()).filter(|&k| i.synthetic_pool[k].selected).collect();
            kept[..3].to_vec()
        })
        .collect();
    let student = pipeline::train_student(&ds, &picks, &bench.schema, &cfg).unwrap();
    let teachers: Vec<_> = traces.iter().filter_map(|t| t.teacher.as_ref()).collect();
    let ctx = InferenceContext { bench: &bench, cfg: &cfg, teachers, embedder: None };
    for (inst, pick) in ds.iter().zip(&picks) {
        let synth: Vec<View> = pick.iter().map(|&k| inst.synthetic_pool[k].view.clone()).collect();
        let x = student.input(&inst.real_view, &synth, inst.entities).unwrap();
        let trained = Label(synthcurate::linalg::argmax(&student.logits(&x).unwrap()) as u32);
        let mut fresh = inst.clone();
        fresh.synthetic_pool.clear();
        assert_eq!(pipeline::infer(&student, &fresh, &ctx).unwrap(), trained);
    }
}

#[test]
fn every_policy_runs_end_to_end() {
    let bench = Benchmark::from_preset(&lossy_world_preset("collapse-heavy").unwrap(), 5, 3, 2).unwrap();
    let base = quick(PipelineConfig { seed: 5, ..Default::default() });
    for c in pipeline::CONDITIONS {
        let cfg = pipeline::condition_config(&base, c).unwrap();
        let out = pipeline::run_pipeline(&bench, &cfg, c, &[]).unwrap();
        assert_eq!(out.report.condition, *c);
        assert_eq!(out.predictions.len(), bench.test.len());
        let teacher_rounds = out.report.rounds.iter().filter(|r| r.teacher_init_hash.is_some()).count();
        let expected = match *c {
            "full" => 2,
            "no_ccg" => 1,
            _ => 0,
        };
        assert_eq!(teacher_rounds, expected, "{c}");
    }
}

#[test]
fn pooled_selection_keeps_global_fraction() {
    let bench = Benchmark::from_preset(&lossy_world_preset("clean").unwrap(), 2, 3, 1).unwrap();
    let cfg = quick(PipelineConfig {
        rounds: 0,
        spawn: vec![],
        initial_views: 10,
        pooled_selection: true,
        ..Default::default()
    });
    let mut ds = bench.train.clone();
    let (records, traces, _) = pipeline::run_selection_rounds(&mut ds, &bench, &cfg).unwrap();
    let kept: usize = traces[0].instances.iter().map(|t| t.selection.kept.len()).sum();
    assert_eq!(kept, 72);
    assert!(records[0].kept_min <= records[0].kept_max);
}

#[test]
fn warm_start_reuses_previous_teacher() {
    let bench = Benchmark::from_preset(&lossy_world_preset("clean").unwrap(), 2, 2, 1).unwrap();
    let cfg = quick(PipelineConfig { warm_start_teacher: true, ..Default::default() });
    let mut ds = bench.train.clone();
    let (records, traces, _) = pipeline::run_selection_rounds(&mut ds, &bench, &cfg).unwrap();
    use synthcurate::models::Parameterized;
    let trained0 = format!("{:016x}", traces[0].teacher.as_ref().unwrap().param_hash());
    assert_eq!(records[1].teacher_init_hash.as_deref(), Some(trained0.as_str()));
}
