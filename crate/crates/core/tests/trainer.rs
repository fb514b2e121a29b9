use coa::dataset::{collect_demos, ActionLayout, Dataset};
use coa::model::{obs_spec_for, param_shapes, ModelConfig, Profile};
use coa::sim::{TaskId, TaskSpec};
use coa::trainer::{
    checkpoint_path, decode_checkpoint, encode_checkpoint, initial_checkpoint, iteration_rng, load_checkpoint,
    load_checkpoint_as, read_trace, run, sample_batch, save_checkpoint, train, write_trace, TrainConfig, TrainData,
    TrainHooks,
};
use coa::CoaError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reach_dataset(n: usize) -> (TaskSpec, Dataset) {
    let spec = TaskSpec::new(TaskId::ReachTarget);
    let demos = collect_demos(&spec, n, 0, ActionLayout::Planar4).unwrap();
    (spec, Dataset::from_demos(TaskId::ReachTarget, demos).unwrap())
}

fn small_model(spec: &TaskSpec, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        mtp_heads: 2,
        max_len: ds.max_episode_len(),
        ..ModelConfig::desk(4, obs_spec_for(spec, false))
    }
}

fn short_run(seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        ..TrainConfig::desk(seed)
    }
}

#[test]
fn batch_of_one_is_deterministic() {
    let lens = [4, 9, 2];
    let a = sample_batch(&lens, 1, &mut iteration_rng(5, 17));
    let b = sample_batch(&lens, 1, &mut iteration_rng(5, 17));
    assert_eq!(a, b);
    assert_ne!(
        (0..20).map(|i| sample_batch(&lens, 1, &mut iteration_rng(5, i))).collect::<Vec<_>>(),
        (0..20).map(|i| sample_batch(&lens, 1, &mut iteration_rng(6, i))).collect::<Vec<_>>()
    );
}

#[test]
fn episodes_are_drawn_uniformly_and_steps_stay_in_range() {
    let lens = [3, 10, 1, 25, 7];
    let n = 100_000;
    let picks = sample_batch(&lens, n, &mut ChaCha8Rng::seed_from_u64(42));
    let mut counts = [0usize; 5];
    for p in &picks {
        assert!(p.t < lens[p.episode]);
        counts[p.episode] += 1;
    }
    // Each count is Binomial(n, 1/5): within 3σ of n/5.
    let (mean, sd) = (n as f64 / 5.0, (n as f64 * 0.2 * 0.8).sqrt());
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
    // Chi-square with 4 degrees of freedom; 18.47 is the 0.999 quantile.
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    assert!(chi2 < 18.47, "chi-square {chi2}");
    // Steps within the longest episode are uniform too.
    let mut steps = [0usize; 25];
    for p in picks.iter().filter(|p| p.episode == 3) {
        steps[p.t] += 1;
    }
    let total: usize = steps.iter().sum();
    let m = total as f64 / 25.0;
    let chi2: f64 = steps.iter().map(|&c| (c as f64 - m).powi(2) / m).sum();
    // 24 degrees of freedom, 0.999 quantile 51.18
    assert!(chi2 < 51.18, "step chi-square {chi2}");
}

#[test]
fn identical_seeds_give_identical_traces() {
    let (spec, ds) = reach_dataset(4);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let a = train(&data, &model, &short_run(1, 6)).unwrap();
    let b = train(&data, &model, &short_run(1, 6)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&data, &model, &short_run(2, 6)).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_suffix() {
    let (spec, ds) = reach_dataset(4);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let full = train(&data, &model, &short_run(9, 10)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let with_ckpt = TrainConfig {
        checkpoint_every: 4,
        ..short_run(9, 10)
    };
    let hooks = TrainHooks {
        eval: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    run(&data, initial_checkpoint(&data, &model, &with_ckpt).unwrap(), hooks).unwrap();
    let mid = load_checkpoint(checkpoint_path(dir.path(), 4)).unwrap();
    assert_eq!(mid.iteration, 4);
    assert!(checkpoint_path(dir.path(), 8).exists());
    let resumed = run(&data, mid, TrainHooks::default()).unwrap();
    assert_eq!(resumed.trace[..], full.trace[4..]);
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.checkpoint.optimizer, full.checkpoint.optimizer);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (spec, ds) = reach_dataset(3);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let ck = train(&data, &model, &short_run(0, 3)).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for (name, t) in ck.params.iter() {
        let b = back.params.get(name).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    assert_eq!(back, ck);
    let bytes = encode_checkpoint(&ck).unwrap();
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
}

#[test]
fn truncated_or_corrupted_checkpoint_is_rejected() {
    let (spec, ds) = reach_dataset(3);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let ck = initial_checkpoint(&data, &model, &short_run(0, 1)).unwrap();
    let bytes = encode_checkpoint(&ck).unwrap();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(decode_checkpoint(&flipped).is_err());
}

#[test]
fn desk_checkpoint_loaded_as_paper_config_names_the_first_mismatch() {
    let (spec, ds) = reach_dataset(3);
    let obs = obs_spec_for(&spec, false);
    let desk = ModelConfig {
        max_len: ds.max_episode_len(),
        ..ModelConfig::for_profile(Profile::Desk, 4, obs.clone())
    };
    let data = TrainData::new(&ds, &spec, &desk).unwrap();
    let ck = initial_checkpoint(&data, &desk, &short_run(0, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let paper = ModelConfig::for_profile(Profile::Paper, 4, obs);
    let err = load_checkpoint_as(&path, &paper).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("shape mismatch"), "{msg}");
    let desk_shapes = param_shapes(&desk);
    let first = param_shapes(&paper)
        .into_iter()
        .zip(desk_shapes)
        .find(|(p, d)| p.1 != d.1)
        .unwrap()
        .0
        .0;
    assert!(msg.contains(&first), "{msg} should name {first}");
}

#[test]
fn batch_larger_than_the_data_is_a_config_error() {
    let (spec, ds) = reach_dataset(2);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let cfg = TrainConfig {
        batch_size: 10_000,
        ..short_run(0, 1)
    };
    assert!(matches!(initial_checkpoint(&data, &model, &cfg), Err(CoaError::Config(_))));
}

#[test]
fn trace_csv_round_trips() {
    let (spec, ds) = reach_dataset(3);
    let model = small_model(&spec, &ds);
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let cfg = TrainConfig {
        eval_every: 2,
        ..short_run(0, 4)
    };
    let mut evals = 0;
    let mut hook = |_: &coa::model::Policy, done: u64| -> coa::Result<f64> {
        evals += 1;
        Ok(done as f64 / 10.0)
    };
    let hooks = TrainHooks {
        eval: Some(&mut hook),
        checkpoint_dir: None,
    };
    let out = run(&data, initial_checkpoint(&data, &model, &cfg).unwrap(), hooks).unwrap();
    assert_eq!(evals, 2);
    assert_eq!(out.trace[1].eval_sr, Some(0.2));
    assert_eq!(out.trace[2].eval_sr, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss_trace.csv");
    write_trace(&path, &out.trace).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("iter,total,act,lat,stop,eval_sr\n"));
    assert_eq!(read_trace(&path).unwrap(), out.trace);
}

#[test]
fn single_sample_dataset_is_overfit() {
    let spec = TaskSpec::new(TaskId::ReachTarget);
    let mut demo = collect_demos(&spec, 1, 0, ActionLayout::Planar4).unwrap().remove(0);
    demo.steps.truncate(1);
    let ds = Dataset::from_demos(TaskId::ReachTarget, vec![demo]).unwrap();
    // without dropout noise the fit can reach the floor
    let model = ModelConfig {
        max_len: 1,
        dropout: 0.0,
        ..ModelConfig::desk(4, obs_spec_for(&spec, false))
    };
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 1,
        ..TrainConfig::desk(0)
    };
    let out = train(&data, &model, &cfg).unwrap();
    let last = out.trace.last().unwrap().loss;
    assert!(last.total < 1e-2, "{last:?}");
}

/// The standard desk run: 2 000 iterations on 100 reach_target demos.
#[test]
fn desk_loss_trend_is_non_increasing() {
    let (spec, ds) = reach_dataset(100);
    let model = ModelConfig {
        max_len: ds.max_episode_len().max(ModelConfig::desk(4, obs_spec_for(&spec, false)).max_len),
        ..ModelConfig::desk(4, obs_spec_for(&spec, false))
    };
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let out = train(&data, &model, &TrainConfig::desk(0)).unwrap();
    // Mean of every 200-step window, compared with the window right after it.
    let totals: Vec<f64> = out.trace.iter().map(|r| r.loss.total).collect();
    let means: Vec<f64> = totals.windows(200).map(|w| w.iter().sum::<f64>() / 200.0).collect();
    let pairs = means.len() - 200;
    let rises = (0..pairs).filter(|&i| means[i + 200] > means[i]).count();
    assert!(rises as f64 <= 0.05 * pairs as f64, "{rises}/{pairs} windows rose: {means:?}");
}
