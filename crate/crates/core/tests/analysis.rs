use coa::analysis::{
    anchor_mass, attention_metrics, emit_report, eval_episodes, evaluate_expert, evaluate_policy, locality_mass,
    paper_reference, pearson, read_results_csv, variance_success_analysis, AblationAxis, AnalysisJson, AttentionDump,
    CellVariant, EvalReport, ResultRow, Split, VariancePoint, MTP_AXIS, SCHEMA_VERSION,
};
use coa::dataset::{collect_demos, ActionLayout, NormStats, Ordering};
use coa::executor::RolloutOptions;
use coa::model::{obs_spec_for, EnsembleConfig, ModelConfig, Policy};
use coa::sim::{TaskId, TaskSpec};
use coa_autodiff::Tensor;
use proptest::prelude::*;

#[test]
fn pearson_fixtures() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&xs, &xs.map(|x| 2.0 * x)).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&xs, &xs.map(|x| -x)).unwrap() + 1.0).abs() < 1e-15);
    assert!((pearson(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    assert!(pearson(&xs, &[2.0; 4]).is_err());
    assert!(pearson(&[1.0], &[1.0]).is_err());
    assert!(pearson(&xs, &[1.0, 2.0]).is_err());
}

fn arb_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn pearson_symmetry_and_affine_invariance(
        (xs, ys) in arb_series(),
        a in 0.1..5.0f64,
        b in -5.0..5.0f64,
    ) {
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
        let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson(&scaled, &ys).unwrap() - r).abs() < 1e-9);
        let flipped: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
        prop_assert!((pearson(&flipped, &ys).unwrap() + r).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn attention_metrics_are_bounded_and_locality_grows_with_w(
        heads in 1usize..3,
        n in 1usize..8,
        seed in 0u64..1000,
    ) {
        let map = random_causal_map(heads, n, seed);
        let mut prev = 0.0;
        for w in 0..=n {
            let l = locality_mass(&map, w).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
            prop_assert!(l + 1e-15 >= prev);
            prev = l;
        }
        prop_assert!((locality_mass(&map, n).unwrap() - 1.0).abs() < 1e-12);
        let a = anchor_mass(&map).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

/// Row-stochastic causal map with pseudo-random weights.
fn random_causal_map(heads: usize, n: usize, seed: u64) -> Tensor {
    let mut data = vec![0.0; heads * n * n];
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for h in 0..heads {
        for i in 0..n {
            let row = &mut data[(h * n + i) * n..(h * n + i + 1) * n];
            for v in row.iter_mut().take(i + 1) {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = 0.05 + (x >> 11) as f64 / (1u64 << 53) as f64;
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
    }
    Tensor::new(vec![heads, n, n], data).unwrap()
}

#[test]
fn identity_and_uniform_attention_closed_forms() {
    let n = 6;
    let eye = Tensor::new(vec![1, n, n], (0..n * n).map(|i| (i / n == i % n) as u8 as f64).collect()).unwrap();
    assert_eq!(locality_mass(&eye, 0).unwrap(), 1.0);
    assert_eq!(locality_mass(&eye, 3).unwrap(), 1.0);
    assert_eq!(anchor_mass(&eye).unwrap(), 0.0);

    let uniform = Tensor::new(
        vec![1, n, n],
        (0..n * n)
            .map(|i| if i % n <= i / n { 1.0 / (i / n + 1) as f64 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let expected: f64 = (1..n).map(|i| 1.0 / (i + 1) as f64).sum::<f64>() / (n - 1) as f64;
    assert!((anchor_mass(&uniform).unwrap() - expected).abs() < 1e-15);
    // row i keeps min(i, w) + 1 of its i + 1 columns
    let w = 2;
    let loc: f64 = (0..n).map(|i| (i.min(w) + 1) as f64 / (i + 1) as f64).sum::<f64>() / n as f64;
    assert!((locality_mass(&uniform, w).unwrap() - loc).abs() < 1e-15);

    let metrics = attention_metrics(&[eye.clone(), uniform.clone()], 3).unwrap();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[1].layer, 1);
    let dump = AttentionDump::from_maps(&[eye, uniform]).unwrap();
    assert_eq!(dump.chain_len, n);
    assert_eq!(dump.to_maps().unwrap()[1], dump.to_maps().unwrap()[1]);
}

fn point(variant: &str, spread: f64, variance: f64, sr: f64) -> VariancePoint {
    VariancePoint {
        variant: variant.into(),
        spread,
        variance,
        success_rate: sr,
    }
}

#[test]
fn variance_analysis_linear_fixture_and_undefined_r() {
    let mut points: Vec<VariancePoint> = [0.01, 0.03, 0.05, 0.07]
        .iter()
        .enumerate()
        .map(|(i, &v)| point("coa", 0.02 + 0.04 * i as f64, v, 1.0 - v))
        .collect();
    points.extend((0..4).map(|i| point("act", 0.02 + 0.04 * i as f64, 0.01 + 0.02 * i as f64, 0.5)));
    let a = variance_success_analysis(&points, Some(("coa", "act"))).unwrap();
    let coa = a.per_variant.iter().find(|c| c.label == "coa").unwrap();
    assert!((coa.r.unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(coa.paper_ref, Some(-0.1679));
    let act = a.per_variant.iter().find(|c| c.label == "act").unwrap();
    assert_eq!(act.r, None);
    assert!(act.note.as_deref().unwrap().contains("zero variance"));
    assert_eq!(act.paper_ref, Some(-0.2471));
    let gap = a.gap.unwrap();
    assert!((gap.r.unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(gap.paper_ref, Some(0.1311));

    assert!(variance_success_analysis(&points[..2], None).is_err());
}

#[test]
fn ablation_axes_enumerate_the_table_rows() {
    assert_eq!(MTP_AXIS, [1, 2, 4, 5, 8, 10]);
    let orderings: Vec<CellVariant> = AblationAxis::Ordering.variants();
    assert_eq!(
        orderings,
        vec![
            CellVariant::Ordering(Ordering::Reverse),
            CellVariant::Ordering(Ordering::Forward),
            CellVariant::Ordering(Ordering::Hybrid)
        ]
    );
    let mtp: Vec<String> = AblationAxis::MtpHeads.variants().iter().map(|v| v.to_string()).collect();
    assert_eq!(mtp, ["mtp_1", "mtp_2", "mtp_4", "mtp_5", "mtp_8", "mtp_10"]);
    assert!(AblationAxis::Baseline.variants().contains(&CellVariant::Baseline(Ordering::ChunkKf)));
    assert_eq!(paper_reference(CellVariant::Ordering(Ordering::Forward)), Some(0.668));
    assert_eq!(paper_reference(CellVariant::MtpHeads(8)), Some(0.672));
    assert_eq!(paper_reference(CellVariant::Ensemble(false)), Some(0.66));
    assert_eq!(paper_reference(CellVariant::Baseline(Ordering::ChunkKf)), Some(0.516));
    let base = ModelConfig::desk(4, obs_spec_for(&TaskSpec::new(TaskId::ReachTarget), false));
    let cfg = CellVariant::MtpHeads(8).apply(&base);
    assert_eq!(cfg.mtp_heads, 8);
    assert_eq!(ModelConfig { mtp_heads: base.mtp_heads, ..cfg }, base);
}

fn untrained(spec: &TaskSpec) -> (Policy, NormStats) {
    let demos = collect_demos(spec, 5, 0, ActionLayout::Planar4).unwrap();
    let stats = NormStats::compute(&demos).unwrap();
    let cfg = ModelConfig {
        max_len: 20,
        ..ModelConfig::desk(4, obs_spec_for(spec, false))
    };
    (Policy::init(cfg, 0).unwrap(), stats)
}

#[test]
fn untrained_policy_rarely_succeeds_and_evaluation_is_idempotent() {
    let spec = TaskSpec::new(TaskId::ReachTarget);
    let (policy, stats) = untrained(&spec);
    let (spec, seeds) = eval_episodes(&spec, Split::All, 10, None).unwrap();
    let opts = RolloutOptions::new(EnsembleConfig::default());
    let (a, _) = evaluate_policy(&policy, &spec, &stats, &seeds, Split::All, "untrained", &opts).unwrap();
    assert!(a.success_rate <= 0.2, "{}", a.success_rate);
    assert_eq!(a.success_rate, a.successes() as f64 / a.n as f64);
    let (b, _) = evaluate_policy(&policy, &spec, &stats, &seeds, Split::All, "untrained", &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn expert_replay_always_succeeds() {
    for task in [TaskId::ReachTarget, TaskId::PushButton, TaskId::PickPlace, TaskId::SlideBlock] {
        let spec = TaskSpec::new(task);
        let (spec, seeds) = eval_episodes(&spec, Split::All, 10, None).unwrap();
        let r = evaluate_expert(&spec, &seeds, Split::All).unwrap();
        assert_eq!(r.success_rate, 1.0, "{}", task.name());
    }
}

#[test]
fn split_seeds_fall_on_their_side_of_the_training_box() {
    let spec = TaskSpec::new(TaskId::PushButton);
    let demos = collect_demos(&spec, 30, 0, ActionLayout::Planar4).unwrap();
    let pos: Vec<[f64; 2]> = demos.iter().map(|d| d.primary_position()).collect();
    let bbox = coa::dataset::bounding_box(&pos).unwrap();
    for (split, inside) in [(Split::Interp, true), (Split::Extrap, false)] {
        let (s, seeds) = eval_episodes(&spec, split, 20, Some(&bbox)).unwrap();
        assert_eq!(seeds.len(), 20);
        assert!(seeds.windows(2).all(|w| w[0] < w[1]));
        for &seed in &seeds {
            let p = coa::sim::sample_objects(&s, seed)[0];
            assert_eq!(bbox.contains(p), inside, "{split} seed {seed}");
        }
    }
}

fn report(variant: &str, rates: &[bool]) -> EvalReport {
    let spec = TaskSpec::new(TaskId::ReachTarget);
    let (spec, seeds) = eval_episodes(&spec, Split::All, rates.len(), None).unwrap();
    let mut r = evaluate_expert(&spec, &seeds, Split::All).unwrap();
    for (e, &ok) in r.episodes.iter_mut().zip(rates) {
        e.success = ok;
    }
    r.variant = variant.into();
    r.success_rate = rates.iter().filter(|&&x| x).count() as f64 / rates.len() as f64;
    r
}

#[test]
fn emitted_artifacts_round_trip_and_carry_the_schema_version() {
    let a = report("reverse", &[true, true, false, true]);
    let b = report("reverse", &[true, false, false, true]);
    let row = ResultRow::from_reports(&[(0, &a), (1, &b)], Some(0.756)).unwrap();
    assert_eq!(row.mean_sr, 0.625);
    assert_eq!(row.std_sr, 0.125);
    let dir = tempfile::tempdir().unwrap();
    let maps = vec![random_causal_map(2, 4, 1)];
    let analysis = AnalysisJson {
        attention: attention_metrics(&maps, 3).unwrap(),
        ..AnalysisJson::default()
    };
    let dump = AttentionDump::from_maps(&maps).unwrap();
    emit_report(dir.path(), std::slice::from_ref(&row), &[a, b], &analysis, Some(&dump)).unwrap();

    let back = read_results_csv(dir.path().join("results.csv")).unwrap();
    assert_eq!(back, vec![row.clone()]);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.starts_with("schema_version,variant,task,split,seeds,mean_sr,std_sr,paper_ref_value\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with(&format!("{SCHEMA_VERSION},")));
    for file in ["analysis.json", "attention_dump.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(file)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION, "{file}");
    }
    let dumped: AttentionDump =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("attention_dump.json")).unwrap()).unwrap();
    assert_eq!(dumped.to_maps().unwrap(), maps);
    let episodes = std::fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 8);
    for line in episodes.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
    }

    assert!(emit_report(dir.path(), &[], &[], &AnalysisJson::default(), None).is_err());
}
