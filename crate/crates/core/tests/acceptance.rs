//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! The desk-scale training criteria train twelve policies and take tens of
//! minutes on one core.

use std::time::{Duration, Instant};

use coa::analysis::{
    anchor_mass, attention_metrics, evaluate, locality_mass, mean_std, pearson, Split,
};
use coa::dataset::{
    build_chain_target, collect_demos, read_dataset, spatial_variance, write_dataset, ActionLayout, Dataset,
    DemoStep, Demonstration, NormStats, Ordering,
};
use coa::executor::{ensemble_next_action, tail_align, EnsembleBuffer, EnsembleEntry, RolloutOptions};
use coa::model::{policy_grad_check, Forward, LossVariant, ModelConfig, ObsSpec, Policy};
use coa::sim::{jacobian_2link, pd_control, ArmModel, TaskId, TaskSpec, SINGULAR_DET};
use coa::trainer::{
    decode_checkpoint, encode_checkpoint, initial_checkpoint, load_checkpoint, run, save_checkpoint, Checkpoint,
    TrainConfig, TrainData, TrainHooks,
};
use coa_autodiff::{grad_check, AttnLayout, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    lines: Vec<(bool, String, String)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, name.to_string(), detail));
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn contract(g: &mut Graph, y: Var, seed: u64) -> coa_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, g.value(y).shape()));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Prim = Box<dyn Fn(&mut Graph, Var) -> coa_autodiff::Result<Var>>;

/// Largest relative error over every primitive (each as the checked input)
/// and the full policy loss.
fn gradient_suite() -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let other = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let target = rand_tensor(&mut rng, &[3, 4]);
    let (bc, oc, rc, tc) = (b.clone(), other.clone(), row.clone(), target.clone());
    let (oc2, rc2, rc3, tc2) = (other.clone(), row.clone(), row.clone(), target.clone());
    let layout = AttnLayout::packed(2, &[2, 1], true);
    let cross = AttnLayout {
        heads: 2,
        queries: vec![(0, 2), (2, 1)],
        keys: vec![(0, 1), (1, 2)],
        causal: false,
    };
    let (k1, v1) = (other.clone(), target.clone());
    let (k2, v2) = (other.clone(), target.clone());
    let prims: Vec<(&str, Prim)> = vec![
        ("matmul", Box::new(move |g, x| {
            let w = g.constant(bc.clone());
            let y = g.matmul(x, w)?;
            contract(g, y, 1)
        })),
        ("add", Box::new(move |g, x| {
            let o = g.constant(oc.clone());
            let y = g.add(x, o)?;
            contract(g, y, 2)
        })),
        ("add/bias", Box::new(move |g, x| {
            let r = g.constant(rc.clone());
            let y = g.add(x, r)?;
            contract(g, y, 3)
        })),
        ("mul", Box::new(move |g, x| {
            let o = g.constant(oc2.clone());
            let y = g.mul(x, o)?;
            contract(g, y, 4)
        })),
        ("scale", Box::new(|g, x| {
            let y = g.scale(x, 0.7)?;
            contract(g, y, 5)
        })),
        ("transpose", Box::new(|g, x| {
            let y = g.transpose(x)?;
            contract(g, y, 6)
        })),
        ("reshape", Box::new(|g, x| {
            let y = g.reshape(x, &[12])?;
            contract(g, y, 7)
        })),
        ("concat", Box::new(|g, x| {
            let y = g.concat(&[x, x], 1)?;
            let y = g.concat(&[y, y], 0)?;
            contract(g, y, 8)
        })),
        ("slice", Box::new(|g, x| {
            let y = g.slice_rows(x, 1, 3)?;
            let y = g.slice_cols(y, 1, 3)?;
            contract(g, y, 9)
        })),
        ("softmax", Box::new(|g, x| {
            let y = g.softmax(x)?;
            contract(g, y, 10)
        })),
        ("masked_fill", Box::new(|g, x| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 == 3).collect();
            let y = g.masked_fill(x, &mask)?;
            let y = g.softmax(y)?;
            contract(g, y, 11)
        })),
        ("layer_norm", Box::new(move |g, x| {
            let gm = g.constant(rc2.clone());
            let bt = g.constant(rc3.clone());
            let y = g.layer_norm(x, gm, bt)?;
            contract(g, y, 12)
        })),
        ("gelu", Box::new(|g, x| {
            let y = g.gelu(x)?;
            contract(g, y, 13)
        })),
        ("embedding", Box::new(|g, x| {
            let y = g.embedding(x, &[2, 0, 2, 1])?;
            contract(g, y, 14)
        })),
        ("linear", Box::new(|g, x| {
            let w = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.3).sin()).collect())?);
            let bias = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
            let y = g.linear(x, w, Some(bias))?;
            contract(g, y, 15)
        })),
        ("self_attention", Box::new(move |g, x| {
            let y = g.attention(x, x, x, &layout)?;
            contract(g, y, 16)
        })),
        ("cross_attention/q", Box::new(move |g, x| {
            let k = g.constant(k1.clone());
            let v = g.constant(v1.clone());
            let y = g.attention(x, k, v, &cross)?;
            contract(g, y, 17)
        })),
        ("cross_attention/kv", Box::new(move |g, x| {
            let q = g.constant(k2.clone());
            let v = g.constant(v2.clone());
            let y = g.attention(q, x, v, &AttnLayout::packed(2, &[3], false))?;
            let z = g.attention(q, v, x, &AttnLayout::packed(2, &[3], false))?;
            let s = g.add(y, z)?;
            contract(g, s, 18)
        })),
        ("l1_loss", Box::new(move |g, x| {
            let t = g.constant(tc.clone());
            g.l1_loss(x, t, Some(&[1.0, 0.5, 0.0]))
        })),
        ("mse_loss", Box::new(move |g, x| {
            let t = g.constant(tc2.clone());
            g.mse_loss(x, t, None)
        })),
        ("bce_with_logits", Box::new(|g, x| {
            let r = g.reshape(x, &[12])?;
            let labels: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
            g.bce_with_logits(r, &labels, None)
        })),
    ];
    let mut worst = (0.0f64, String::new());
    for (name, f) in &prims {
        let err = grad_check(f, &a, 1e-5).unwrap_or(f64::INFINITY);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.to_string());
        }
    }
    for (name, err) in policy_grad_check(0).expect("policy gradient check runs") {
        if err > worst.0 {
            worst = (err, format!("policy/{name}"));
        }
    }
    worst
}

fn tiny_config(heads: usize) -> ModelConfig {
    let obs = ObsSpec::State { groups: vec![3, 2, 4] };
    ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        dropout: 0.0,
        mtp_heads: heads,
        max_len: 6,
        action_dim: 4,
        ..ModelConfig::desk(4, obs)
    }
}

fn tiny_obs() -> Vec<f64> {
    (0..9).map(|i| (i as f64 * 0.61).cos()).collect()
}

/// All decoder outputs (trunk, stop, every head latent and action), row-major.
fn decoder_outputs(p: &Policy, inputs: &Tensor) -> Vec<Vec<f64>> {
    let mut f = Forward::new(p, None);
    let o = tiny_obs();
    let (mem, segs) = f.encode(&[&o]).unwrap();
    let x = f.g.constant(inputs.clone());
    let out = f.decode(mem, &segs, x, &[inputs.rows()], true).unwrap();
    let mut all = vec![f.g.value(out.trunk).data().to_vec(), f.g.value(out.stop_logits).data().to_vec()];
    for h in 0..p.config.mtp_heads {
        all.push(f.g.value(out.head_latents[h]).data().to_vec());
        all.push(f.g.value(out.head_actions[h]).data().to_vec());
    }
    all
}

fn causality() -> (bool, String) {
    let p = Policy::init(tiny_config(3), 21).unwrap();
    let (l, d) = (6, 8);
    let base = Tensor::new(vec![l, d], (0..l * d).map(|i| (i as f64 * 0.17).sin()).collect()).unwrap();
    let reference = decoder_outputs(&p, &base);
    let mut violations = 0;
    for j in 0..l {
        let mut pert = base.clone();
        for c in 0..d {
            pert.data_mut()[j * d + c] += 1.3;
        }
        let got = decoder_outputs(&p, &pert);
        for (r, g) in reference.iter().zip(&got) {
            let w = r.len() / l;
            if r[..j * w] != g[..j * w] {
                violations += 1;
            }
        }
    }
    (violations == 0, format!("L=6, 3 heads, {violations} outputs changed before the perturbed position"))
}

fn toy_demo(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Demonstration {
    Demonstration {
        task: TaskId::ReachTarget,
        seed: 0,
        steps: (0..n)
            .map(|_| DemoStep {
                obs: vec![rng.random_range(-1.0..1.0); 9],
                act: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect(),
        success: true,
        object_positions: vec![[0.5, 0.5]],
    }
}

fn attention_invariants() -> (bool, String) {
    let p = Policy::init(tiny_config(2), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let demo = toy_demo(&mut rng, 5, 4);
    let targets: Vec<_> = [0, 2, 4]
        .iter()
        .map(|&t| build_chain_target(&demo, t, Ordering::Reverse, 6, 2).unwrap())
        .collect();
    let mut f = Forward::new(&p, None);
    let o = tiny_obs();
    let (mem, segs) = f.encode(&[&o, &o, &o]).unwrap();
    let refs: Vec<_> = targets.iter().collect();
    let (out, _) = f.teacher_forced(mem, &segs, &refs, true).unwrap();
    let mut worst_sum = 0.0f64;
    let mut leaks = 0;
    let mut metrics_ok = true;
    for (b, t) in targets.iter().enumerate() {
        let valid = t.valid_len();
        let maps = f.attention_maps(&out, b);
        for m in &maps {
            let n = m.shape()[1];
            for r in 0..m.shape()[0] * n {
                let row = &m.data()[r * n..(r + 1) * n];
                let i = r % n;
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                leaks += row[i + 1..].iter().filter(|&&x| x != 0.0).count();
                if i < valid {
                    leaks += row[valid..].iter().filter(|&&x| x != 0.0).count();
                }
            }
        }
        let mut prev = 0.0;
        for w in 0..=6 {
            for lm in attention_metrics(&maps, w).unwrap() {
                metrics_ok &= (0.0..=1.0).contains(&lm.locality_mass) && (0.0..=1.0).contains(&lm.anchor_mass);
            }
            let loc: f64 = maps.iter().map(|m| locality_mass(m, w).unwrap()).sum();
            metrics_ok &= loc >= prev - 1e-15;
            prev = loc;
            metrics_ok &= maps.iter().all(|m| anchor_mass(m).is_ok());
        }
    }
    (
        worst_sum <= 1e-6 && leaks == 0 && metrics_ok,
        format!("max |row sum − 1| = {worst_sum:.1e}, {leaks} nonzero future/padding entries, metrics bounded and monotone: {metrics_ok}"),
    )
}

/// Brute force: enumerate every (entry, time) pair the entry covers and
/// keep those at time `s`; reverse chains end at `t + len`.
fn alignment_oracle(entries: &[(usize, Vec<Vec<f64>>)], s: usize, m: f64) -> Vec<f64> {
    let mut hits = Vec::new();
    for (t, tokens) in entries {
        let n = tokens.len();
        for (k, tok) in tokens.iter().enumerate() {
            if t + n - k == s {
                hits.push((*t, tok.clone()));
            }
        }
    }
    let newest = hits.iter().map(|h| h.0).max().unwrap();
    let w: Vec<f64> = hits.iter().map(|h| (-m * (newest - h.0) as f64).exp()).collect();
    let z: f64 = w.iter().sum();
    let dim = hits[0].1.len();
    (0..dim)
        .map(|c| hits.iter().zip(&w).map(|(h, w)| w * h.1[c]).sum::<f64>() / z)
        .collect()
}

fn ensemble_oracle() -> (bool, String) {
    let layout = ActionLayout::Planar4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let horizon = 12;
    let truth: Vec<Vec<f64>> = (0..horizon)
        .map(|_| {
            let mut a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            a.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            a
        })
        .collect();
    // Perfect suffix at t: [a_T, …, a_{t+1}] with a_k = truth[k-1].
    let suffix = |t: usize| (t..horizon).rev().map(|k| truth[k].clone()).collect::<Vec<_>>();
    let mut worst = 0.0f64;
    for m in [0.0, 0.01, 10.0] {
        let mut buf = EnsembleBuffer::new(m, 8, layout).unwrap();
        for t in 0..horizon {
            buf.push(EnsembleEntry::new(t, Ordering::Reverse, suffix(t)).unwrap()).unwrap();
            let s = t + 1;
            let got = ensemble_next_action(&buf, s).unwrap();
            for (g, e) in got.iter().zip(&truth[s - 1]) {
                worst = worst.max((g - e).abs());
            }
        }
    }
    let single_ok = (0..horizon).all(|t| {
        let entry = EnsembleEntry::new(t, Ordering::Reverse, suffix(t)).unwrap();
        let mut buf = EnsembleBuffer::new(0.01, 4, layout).unwrap();
        buf.push(entry.clone()).unwrap();
        ensemble_next_action(&buf, t + 1).unwrap().as_slice() == tail_align(&entry, t + 1).unwrap()
    });
    let (k, p, q) = (vec![0.9, 0.1, 0.2, 1.0], vec![0.3, -0.4, 0.5, 1.0], vec![0.2, 0.2, 0.2, 1.0]);
    let (k2, r) = (vec![0.8, 0.0, 0.1, 1.0], vec![0.5, -0.2, 0.1, 1.0]);
    let entries = vec![(0, vec![k, p.clone(), q]), (1, vec![k2, r.clone()])];
    let mut buf = EnsembleBuffer::new(0.0, 4, layout).unwrap();
    for (t, tok) in &entries {
        buf.push(EnsembleEntry::new(*t, Ordering::Reverse, tok.clone()).unwrap()).unwrap();
    }
    let got = ensemble_next_action(&buf, 2).unwrap();
    let oracle = alignment_oracle(&entries, 2, 0.0);
    let mean: Vec<f64> = p.iter().zip(&r).map(|(a, b)| (a + b) / 2.0).collect();
    let two_ok = got.iter().zip(&oracle).zip(&mean).all(|((g, o), e)| (g - o).abs() <= 1e-12 && (g - e).abs() <= 1e-12);
    (
        worst <= 1e-12 && single_ok && two_ok,
        format!("perfect-suffix max err {worst:.1e} (m ∈ {{0, 0.01, 10}}); single entry bit-equal: {single_ok}; two-rollout mean(p, r): {two_ok}"),
    )
}

/// Independent index mapping: 1-based action times in token order, capacity.
fn oracle_times(n: usize, t: usize, ordering: Ordering, l: usize) -> (Vec<Option<usize>>, usize) {
    let mut times: Vec<Option<usize>> = match ordering {
        Ordering::Reverse => (t + 1..=n).rev().map(Some).collect(),
        Ordering::Forward => (t + 1..=n).map(Some).collect(),
        Ordering::Hybrid => {
            let mut v = vec![Some(n)];
            v.extend((t + 1..n).map(Some));
            v
        }
        Ordering::Chunk | Ordering::ChunkKf => {
            let mut v: Vec<_> = (t + 1..=t + 20).map(|k| (k <= n).then_some(k)).collect();
            if ordering == Ordering::ChunkKf {
                v.push(Some(n));
            }
            v
        }
    };
    let cap = match ordering {
        Ordering::Chunk => 20,
        Ordering::ChunkKf => 21,
        _ => l,
    };
    times.resize(cap, None);
    (times, cap)
}

fn chain_target_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=30);
        let demo = toy_demo(&mut rng, n, 4);
        let t = rng.random_range(0..n);
        let ordering = Ordering::ALL[rng.random_range(0..Ordering::ALL.len())];
        let l = n - t + rng.random_range(0..4);
        let h = rng.random_range(1..=6);
        let got = build_chain_target(&demo, t, ordering, l, h).unwrap();
        let (times, cap) = oracle_times(n, t, ordering, l);
        let chunked = matches!(ordering, Ordering::Chunk | Ordering::ChunkKf);
        let last_valid = times.iter().rposition(Option::is_some).unwrap();
        let mut ok = got.capacity() == cap && got.keyframe == demo.action(n - 1);
        for (j, time) in times.iter().enumerate() {
            let tok = time.map(|k| demo.action(k - 1).to_vec()).unwrap_or(vec![0.0; 4]);
            let stop = if !chunked && j == last_valid { 1.0 } else { 0.0 };
            ok &= got.mask[j] == time.is_some() && got.tokens[j] == tok && got.stop[j] == stop;
            for head in 1..=h {
                let k = j + head - 1;
                let expect = (time.is_some() && k < cap && times[k].is_some()).then_some(k);
                ok &= got.mtp_target(head, j) == expect;
            }
        }
        if !ok {
            mismatches += 1;
            if mismatches == 1 {
                println!("  first mismatch: case {case}, n={n} t={t} {ordering} l={l} h={h}");
            }
        }
    }
    (mismatches == 0, format!("{mismatches}/1000 random cases differ from the brute-force mapping"))
}

fn round_trips() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec::new(TaskId::ReachTarget);
    let demos = collect_demos(&spec, 6, 50, ActionLayout::Planar4).unwrap();
    let ds = Dataset::from_demos(TaskId::ReachTarget, demos).unwrap();
    let path = dir.path().join("reach.jsonl");
    write_dataset(&path, &ds).unwrap();
    let dataset_ok = read_dataset(&path).unwrap() == ds;

    let obs = coa::model::obs_spec_for(&spec, false);
    let model = ModelConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        mtp_heads: 2,
        max_len: ds.max_episode_len(),
        ..ModelConfig::desk(4, obs)
    };
    let data = TrainData::new(&ds, &spec, &model).unwrap();
    let train = TrainConfig {
        iterations: 8,
        batch_size: 4,
        ..TrainConfig::desk(3)
    };
    let straight = run(&data, initial_checkpoint(&data, &model, &train).unwrap(), TrainHooks::default()).unwrap();
    let half = TrainConfig { iterations: 4, ..train.clone() };
    let first = run(&data, initial_checkpoint(&data, &model, &half).unwrap(), TrainHooks::default()).unwrap();
    let ck_path = dir.path().join("half.ckpt");
    save_checkpoint(&ck_path, &first.checkpoint).unwrap();
    let mut loaded: Checkpoint = load_checkpoint(&ck_path).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint).unwrap();
    let ckpt_ok = loaded == first.checkpoint && encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap() == bytes;
    loaded.train.iterations = 8;
    let resumed = run(&data, loaded, TrainHooks::default()).unwrap();
    let mut joined = first.trace.clone();
    joined.extend(resumed.trace);
    let trace_ok = joined == straight.trace && resumed.checkpoint.params == straight.checkpoint.params;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stats = NormStats::compute(&collect_demos(&spec, 3, 80, ActionLayout::Planar4).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        // constant dimensions only hold their single value
        let draw = |rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]| -> Vec<f64> {
            lo.iter()
                .zip(hi)
                .map(|(&a, &b)| if b > a { rng.random_range(-2.0..2.0) } else { a })
                .collect()
        };
        let a = draw(&mut rng, &stats.action_min, &stats.action_max);
        let back = stats.denormalize_action(&stats.normalize_action(&a));
        let o = draw(&mut rng, &stats.obs_min, &stats.obs_max);
        let back_o = stats.denormalize_obs(&stats.normalize_obs(&o));
        for (x, y) in a.iter().zip(&back).chain(o.iter().zip(&back_o)) {
            worst = worst.max((x - y).abs());
        }
    }
    (
        dataset_ok && ckpt_ok && trace_ok && worst <= 1e-12,
        format!("dataset identity {dataset_ok}; checkpoint bit-identity {ckpt_ok}; resumed trace equal {trace_ok}; normalize∘denormalize max err {worst:.1e}"),
    )
}

fn analysis_math() -> (bool, String) {
    // mean 3 and 4; Σdxdy = 6, Σdx² = 10, Σdy² = 6 → r = 6/√60
    let r1 = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
    let e1 = 6.0 / 60f64.sqrt();
    // y = 1.1 − 2x
    let r2 = pearson(&[0.1, 0.2, 0.3], &[0.9, 0.7, 0.5]).unwrap();
    // symmetric bump: Σdxdy = 0
    let r3 = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 1.0]).unwrap();
    // Σdxdy = 4, Σdx² = Σdy² = 5 → r = 0.8
    let r4 = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let pearson_ok =
        (r1 - e1).abs() <= 1e-12 && (r2 + 1.0).abs() <= 1e-12 && r3.abs() <= 1e-12 && (r4 - 0.8).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_var = 0.0f64;
    for _ in 0..100 {
        let pts: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let (dx, dy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        worst_var = worst_var.max((spatial_variance(&pts).unwrap() - spatial_variance(&moved).unwrap()).abs());
    }

    let mut arm = ArmModel::new(1.0, 1.0, [0.0, std::f64::consts::FRAC_PI_2]);
    arm.kp = 2.0;
    arm.kd = 0.0;
    let qd = pd_control(&arm, [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
    // cos(π/2) is 6.1e-17 in f64: J and det J carry 1e-16 residue.
    let pd_ok = qd[0].abs() <= 1e-12 && (qd[1] + 2.0).abs() <= 1e-12;
    let straight = ArmModel::new(1.0, 1.0, [0.4, 0.0]);
    let j = jacobian_2link(&straight);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let sing_cmd = pd_control(&straight, [2.5, 0.0], straight.forward_kinematics(), [0.0, 0.0]);
    let singular_ok = det.abs() < SINGULAR_DET && sing_cmd.iter().all(|v| v.is_finite());
    (
        pearson_ok && worst_var <= 1e-12 && pd_ok && singular_ok,
        format!(
            "pearson fixtures {pearson_ok} (r = {r1:.15}); translation drift {worst_var:.1e}; PD q̇ = ({:.1e}, {}) within 1e-12; singularity at q2=0 detected (|det J| = {:.1e}): {singular_ok}",
            qd[0],
            qd[1],
            det.abs()
        ),
    )
}

struct Trained {
    seed: u64,
    ck: Checkpoint,
    elapsed: Duration,
}

fn train_desk(ds: &Dataset, spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Trained {
    let start = Instant::now();
    let data = TrainData::new(ds, spec, model).unwrap();
    let train = TrainConfig::desk(seed);
    let ck = run(&data, initial_checkpoint(&data, model, &train).unwrap(), TrainHooks::default())
        .unwrap()
        .checkpoint;
    let elapsed = start.elapsed();
    println!("  trained {} {} seed {seed} in {:.0?}", spec.task.name(), model.ordering, elapsed);
    Trained { seed, ck, elapsed }
}

fn success(ck: &Checkpoint, n: usize, split: Split, ensemble: bool) -> f64 {
    let mut cfg = ck.model.ensemble;
    cfg.enabled = ensemble;
    evaluate(ck, n, split, "acceptance", &RolloutOptions::new(cfg)).unwrap().0.success_rate
}

fn desk_model(spec: &TaskSpec, ds: &Dataset) -> ModelConfig {
    let mut m = ModelConfig::desk(4, coa::model::obs_spec_for(spec, false));
    m.max_len = m.max_len.max(ds.max_episode_len());
    m
}

const SEEDS: [u64; 3] = [0, 1, 2];

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };

    let start = Instant::now();
    let (err, worst) = gradient_suite();
    let took = start.elapsed();
    report.record(
        "gradient suite",
        err <= 1e-5 && took < Duration::from_secs(60),
        format!("max rel err {err:.2e} ({worst}), {took:.1?}"),
    );

    let (ok, d) = causality();
    report.record("causality", ok, d);
    let (ok, d) = attention_invariants();
    report.record("attention invariants", ok, d);
    let (ok, d) = ensemble_oracle();
    report.record("ensemble oracle", ok, d);
    let (ok, d) = chain_target_oracle();
    report.record("chain-target oracle", ok, d);
    let (ok, d) = round_trips();
    report.record("round trips", ok, d);
    let (ok, d) = analysis_math();
    report.record("analysis math", ok, d);

    // reach_target, 100 demos at σ = 0.1, desk profile.
    let reach = TaskSpec::new(TaskId::ReachTarget);
    let reach_ds = Dataset::from_demos(TaskId::ReachTarget, collect_demos(&reach, 100, 0, ActionLayout::Planar4).unwrap()).unwrap();
    let base = desk_model(&reach, &reach_ds);
    let latent: Vec<Trained> = SEEDS.iter().map(|&s| train_desk(&reach_ds, &reach, &base, s)).collect();
    let on: Vec<f64> = latent.iter().map(|t| success(&t.ck, 25, Split::Interp, true)).collect();
    let slowest = latent.iter().map(|t| t.elapsed).max().unwrap();
    let (mean_on, _) = mean_std(&on);
    report.record(
        "desk-scale training",
        mean_on >= 0.8 && slowest <= Duration::from_secs(15 * 60),
        format!("reach_target interp success {on:?}, mean {mean_on:.3} (≥ 0.8); slowest run {slowest:.0?}"),
    );

    let recon_model = ModelConfig {
        loss_variant: LossVariant::ActionReconstruction,
        ..base.clone()
    };
    let recon: Vec<f64> = SEEDS
        .iter()
        .map(|&s| success(&train_desk(&reach_ds, &reach, &recon_model, s).ck, 25, Split::Interp, true))
        .collect();
    let wins = on.iter().zip(&recon).filter(|(a, b)| a >= b).count();
    report.record(
        "loss-variant trend",
        wins >= 2,
        format!("latent_consistency {on:?} vs action_reconstruction {recon:?}: ≥ in {wins}/3 seeds"),
    );

    let off: Vec<f64> = latent.iter().map(|t| success(&t.ck, 25, Split::Interp, false)).collect();
    let (mean_off, _) = mean_std(&off);
    report.record(
        "ensemble trend",
        mean_on >= mean_off,
        format!("ensemble on {mean_on:.3} {on:?} vs off {mean_off:.3} {off:?}"),
    );
    drop(latent);

    // push_button: 100 train / 50 interp / 50 extrap.
    let push = TaskSpec::new(TaskId::PushButton);
    let push_ds = Dataset::from_demos(TaskId::PushButton, collect_demos(&push, 100, 0, ActionLayout::Planar4).unwrap()).unwrap();
    let push_base = desk_model(&push, &push_ds);
    let mut rev_interp = Vec::new();
    let mut rev_extrap = Vec::new();
    let mut fwd_extrap = Vec::new();
    for &s in &SEEDS {
        let rev = train_desk(&push_ds, &push, &push_base, s);
        rev_interp.push(success(&rev.ck, 50, Split::Interp, true));
        rev_extrap.push(success(&rev.ck, 50, Split::Extrap, true));
        let fwd_model = ModelConfig {
            ordering: Ordering::Forward,
            ..push_base.clone()
        };
        let fwd = train_desk(&push_ds, &push, &fwd_model, s);
        fwd_extrap.push(success(&fwd.ck, 50, Split::Extrap, true));
        println!("  seed {}: reverse interp {:.2} extrap {:.2}, forward extrap {:.2}", rev.seed, rev_interp.last().unwrap(), rev_extrap.last().unwrap(), fwd_extrap.last().unwrap());
    }
    let wins = rev_extrap.iter().zip(&fwd_extrap).filter(|(r, f)| r >= f).count();
    let (mean_rev_interp, _) = mean_std(&rev_interp);
    report.record(
        "ordering trend",
        wins >= 2 && mean_rev_interp >= 0.7,
        format!(
            "push_button extrap reverse {rev_extrap:?} vs forward {fwd_extrap:?} (reverse ≥ in {wins}/3 seeds); reverse interp {rev_interp:?}, mean {mean_rev_interp:.3} (≥ 0.7)"
        ),
    );

    let failed: Vec<&str> = report.lines.iter().filter(|l| !l.0).map(|l| l.1.as_str()).collect();
    println!("{}/{} criteria passed", report.lines.len() - failed.len(), report.lines.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
