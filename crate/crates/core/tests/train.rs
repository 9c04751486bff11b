use std::fs;
use std::path::Path;

use octscreen::data::{synth_generate, Dataset, SynthSpec, TierWeights};
use octscreen::model::{transfer_encoder, HeadKind, Model, ModelConfig};
use octscreen::nn::ParamStore;
use octscreen::train::checkpoint::HEADER_BYTES;
use octscreen::train::{
    adam_step, average_probabilities, clip_global_norm, ensemble_predict, ensemble_predict_checkpoints,
    load_checkpoint, nesterov_step, poly_lr, save_checkpoint, train, vae_total_loss, weighted_ce_loss, Checkpoint,
    GradMap, LrSchedule, OptimizerKind, OptimizerState, Phase, TrainConfig, VaeLossConfig,
};
use octscreen::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth(dir: &Path, n_per_class: usize, seed: u64) -> Dataset {
    let manifest = synth_generate(
        &SynthSpec {
            n_per_class,
            size: 64,
            seed,
        },
        dir,
    )
    .unwrap();
    Dataset::load(&manifest, &TierWeights::default()).unwrap()
}

fn quick(phase: Phase, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_phase(phase);
    c.max_steps = steps;
    c.schedule.total_steps = steps;
    c.eval_every = steps.div_ceil(2).max(1);
    c.batch_size = 8;
    c
}

fn store(v: &[(&str, &[f64])]) -> ParamStore<f32> {
    let mut s = ParamStore::new(0);
    for (n, d) in v {
        s.insert_param(*n, Tensor::from_f64([d.len()], d).unwrap());
    }
    s
}

fn gmap(v: &[(&str, &[f64])]) -> GradMap {
    v.iter()
        .map(|(n, d)| (n.to_string(), Tensor::from_f64([d.len()], d).unwrap()))
        .collect()
}

// ---------- losses ----------

fn ce_rows(logits: &[f64], k: usize, labels: &[usize], eps: f64) -> Vec<f64> {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            (0..k)
                .map(|j| {
                    let t = eps / k as f64 + if j == l { 1.0 - eps } else { 0.0 };
                    -t * (row[j] - lse)
                })
                .sum()
        })
        .collect()
}

fn ce_of(logits: &[f64], k: usize, labels: &[usize], w: &[f32], eps: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::from_f64([labels.len(), k], logits).unwrap());
    let loss = weighted_ce_loss(&mut g, l, labels, w, eps).unwrap();
    g.value(loss).item()
}

#[test]
fn equal_weights_match_unweighted_mean_ce() {
    let logits = [0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.5, 0.7, -2.0, 0.4, 0.4, 3.1];
    let labels = [2, 0, 3];
    let want = ce_rows(&logits, 4, &labels, 0.1).iter().sum::<f64>() / 3.0;
    for w in [1.0f32, 0.3, 7.0] {
        assert!((ce_of(&logits, 4, &labels, &[w; 3], 0.1) - want).abs() < 1e-7);
    }
}

#[test]
fn vanishing_weight_leaves_first_sample() {
    let logits = [0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.5, 0.7];
    let first = ce_rows(&logits[..4], 4, &[1], 0.1)[0];
    assert!((ce_of(&logits, 4, &[1, 2], &[1.0, 1e-9], 0.1) - first).abs() < 1e-6);
}

#[test]
fn uniform_logits_cost_ln_four() {
    assert!((ce_of(&[0.0; 8], 4, &[0, 3], &[1.0, 1.0], 0.0) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn vae_loss_parts() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 2], &[0.2, 0.9]).unwrap());
    let mu = g.input(Tensor::from_f64([1, 1], &[1.0]).unwrap());
    let lv = g.input(Tensor::zeros([1, 1]));
    let logits = g.input(Tensor::zeros([1, 4]));
    let cfg = VaeLossConfig {
        beta: 2.0,
        lambda: 0.5,
        epsilon: 0.0,
    };
    let l = vae_total_loss(&mut g, x, x, mu, lv, logits, &[0], &[1.0], &cfg).unwrap();
    assert_eq!(g.value(l.mse).item(), 0.0);
    assert_eq!(g.value(l.kl).item(), 0.5);
    let want = 2.0 * 0.5 + 0.5 * 4f64.ln();
    assert!((g.value(l.total).item() - want).abs() < 1e-12);
    let other = g.input(Tensor::zeros([1, 3]));
    assert!(vae_total_loss(&mut g, other, x, mu, lv, logits, &[0], &[1.0], &cfg).is_err());
}

// ---------- optimizers ----------

#[test]
fn adam_alternating_gradients_oscillate_within_lr() {
    let lr = 1e-3;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut p = store(&[("w", &[0.0])]);
    let mut st = OptimizerState::new(OptimizerKind::adam());
    // scalar reference run alongside
    let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.0f64);
    let mut prev = 0.0f64;
    for t in 1..=100 {
        let g = if t % 2 == 1 { 1.0 } else { -1.0 };
        adam_step(&mut p, &gmap(&[("w", &[g])]), &mut st, lr).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        q -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let now = p.param("w").unwrap().data()[0] as f64;
        assert!((now - q).abs() < 1e-8, "step {t}: {now} vs {q}");
        let delta = now - prev;
        assert!(delta.abs() <= lr * (1.0 + 1e-4), "step {t}: |delta| {}", delta.abs());
        if t > 1 {
            assert_eq!(delta > 0.0, g < 0.0, "step {t} moves against the gradient");
        }
        prev = now;
    }
    assert_eq!(st.step(), 100);
}

#[test]
fn nesterov_velocity_approaches_geometric_limit() {
    let (lr, mu, g) = (0.01, 0.9, 0.5);
    let mut p = store(&[("w", &[1.0, -1.0])]);
    let mut st = OptimizerState::new(OptimizerKind::Nesterov { momentum: mu });
    for _ in 0..100 {
        nesterov_step(&mut p, &gmap(&[("w", &[g, g])]), &mut st, lr).unwrap();
    }
    let limit = -lr * g / (1.0 - mu);
    for &v in &st.slots("w").unwrap()[0] {
        assert!(((v - limit) / limit).abs() < 0.01, "{v} vs {limit}");
    }
}

#[test]
fn nesterov_zero_state_zero_gradient_is_noop() {
    let mut p = store(&[("w", &[0.25, 3.0])]);
    let mut st = OptimizerState::new(OptimizerKind::nesterov());
    nesterov_step(&mut p, &gmap(&[("w", &[0.0, 0.0])]), &mut st, 0.1).unwrap();
    assert_eq!(p.param("w").unwrap().data(), &[0.25, 3.0]);
}

#[test]
fn clip_post_norm_is_min_of_norm_and_max() {
    for max in [0.5, 5.0, 13.0, 100.0] {
        let mut g = gmap(&[("a", &[3.0, 4.0]), ("b", &[12.0])]);
        let n = clip_global_norm(&mut g, max).unwrap();
        assert!((n - 13.0).abs() < 1e-9);
        let after = g
            .values()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((after - n.min(max)).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn poly_lr_is_nonincreasing(end in 0.0f64..0.1, extra in 0.0f64..1.0, power in 0.05f64..6.0, total in 1usize..5000) {
        let s = LrSchedule { base_lr: end + extra, end_lr: end, power, total_steps: total };
        let mut prev = poly_lr(0, &s);
        prop_assert!((prev - s.base_lr).abs() < 1e-15);
        for t in (1..=total + 3).step_by((total / 97).max(1)) {
            let lr = poly_lr(t, &s);
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= end - 1e-15);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(total, &s), end);
    }
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn update_order_does_not_matter(
        a in vec_strategy(), b in vec_strategy(), c in vec_strategy(),
        steps in 1usize..4, adam in any::<bool>(), shuffle_seed in any::<u64>(),
    ) {
        let kind = if adam { OptimizerKind::adam() } else { OptimizerKind::nesterov() };
        let names = ["alpha", "beta", "gamma"];
        let vals = [a, b, c];
        let init: Vec<(&str, &[f64])> = names.iter().zip(&vals).map(|(n, v)| (*n, v.as_slice())).collect();
        let grads: Vec<Vec<f64>> = vals.iter().map(|v| v.iter().map(|x| x.sin()).collect()).collect();
        let gm: Vec<(&str, &[f64])> = names.iter().zip(&grads).map(|(n, v)| (*n, v.as_slice())).collect();
        let gm = gmap(&gm);

        let mut sorted = store(&init);
        let mut st = OptimizerState::new(kind);
        for _ in 0..steps {
            st.apply(&mut sorted, &gm, 0.05).unwrap();
        }

        let mut shuffled = store(&init);
        let mut st2 = OptimizerState::new(kind);
        let mut order: Vec<&str> = names.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for _ in 0..steps {
            order.shuffle(&mut rng);
            st2.begin_step();
            for n in &order {
                st2.update(n, shuffled.param_mut(n).unwrap(), &gm[*n], 0.05).unwrap();
            }
        }
        for n in names {
            prop_assert_eq!(sorted.param(n).unwrap(), shuffled.param(n).unwrap());
        }
    }

    #[test]
    fn clipping_never_grows_a_gradient(a in vec_strategy(), b in vec_strategy(), max in 0.01f64..10.0) {
        let mut g = gmap(&[("a", &a), ("b", &b)]);
        let before = g.clone();
        clip_global_norm(&mut g, max).unwrap();
        for (k, t) in &g {
            for (x, y) in t.data().iter().zip(before[k].data()) {
                prop_assert!(x.abs() <= y.abs());
                prop_assert!(x * y >= 0.0);
            }
        }
    }
}

// ---------- checkpoints ----------

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn assert_bit_identical(a: &ParamStore<f32>, b: &ParamStore<f32>) {
    let pa: Vec<_> = a.params().chain(a.buffers()).collect();
    let pb: Vec<_> = b.params().chain(b.buffers()).collect();
    assert_eq!(pa.len(), pb.len());
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape(), "{na}");
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::toy(), 5).unwrap();
    let path = dir.path().join("m.octc");
    let saved = save_checkpoint(&model, &path, 42, [("binary_auc".to_string(), 0.75)].into()).unwrap();

    let expected_len = HEADER_BYTES
        + model
            .params
            .params()
            .chain(model.params.buffers())
            .map(|(n, t)| 4 + n.len() + 4 + 8 * t.shape().len() + 4 * t.numel())
            .sum::<usize>()
        + saved.metadata.len();
    assert_eq!(fs::metadata(&path).unwrap().len() as usize, expected_len);

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, saved);
    let meta = loaded.meta().unwrap();
    assert_eq!(meta.step, 42);
    assert_eq!(meta.metrics["binary_auc"], 0.75);
    assert_eq!(meta.config_digest, model.cfg.digest());
    let back = loaded.to_model().unwrap();
    assert_bit_identical(&model.params, &back.params);
}

#[test]
fn round_trip_after_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let vae = Model::new(ModelConfig::toy().with_head(HeadKind::VaeTwohead), 3).unwrap();
    let mut cls = Model::new(ModelConfig::toy(), 4).unwrap();
    let rep = transfer_encoder(&vae.params, &mut cls.params).unwrap();
    assert!(rep.matched > 0);
    let path = dir.path().join("t.octc");
    save_checkpoint(&cls, &path, 0, Default::default()).unwrap();
    let back = load_checkpoint(&path).unwrap().to_model().unwrap();
    assert_bit_identical(&cls.params, &back.params);
    let x = Tensor::full([2, 3, 56, 56], 0.3);
    assert_eq!(
        bits(&cls.clone().predict(&x).unwrap()),
        bits(&back.clone().predict(&x).unwrap())
    );
}

#[test]
fn corrupted_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::toy(), 5).unwrap();
    let path = dir.path().join("m.octc");
    save_checkpoint(&model, &path, 0, Default::default()).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"PK\x03\x04");
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("magic")));

    fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("truncated")));

    // valid container, wrong config for the tensors
    let mut ck = Checkpoint::from_model(&model, 0, Default::default()).unwrap();
    ck.tensors.retain(|(n, _)| n != "head.fc.weight");
    assert!(matches!(ck.to_model(), Err(Error::Format(m)) if m.contains("head.fc.weight")));
}

// ---------- training loop ----------

#[test]
fn classifier_loss_falls_over_two_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("d"), 8, 3);
    let mut model = Model::new(ModelConfig::toy(), 1).unwrap();
    let cfg = quick(Phase::Classifier, 201);
    let out = train(&mut model, &data, None, &cfg, &dir.path().join("out")).unwrap();
    assert_eq!(out.losses.len(), 201);
    assert!(
        out.losses[200] < out.losses[0],
        "{} !< {}",
        out.losses[200],
        out.losses[0]
    );
    assert!(out.best.is_none());
    assert!(out.last.exists());
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("d"), 4, 5);
    let val = synth(&dir.path().join("v"), 2, 6);
    let cfg = quick(Phase::Classifier, 6);
    let run = |name: &str| {
        let mut model = Model::new(ModelConfig::toy(), 2).unwrap();
        let out = train(&mut model, &data, Some(&val), &cfg, &dir.path().join(name)).unwrap();
        (
            out.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            fs::read(&out.log).unwrap(),
            fs::read(&out.last).unwrap(),
            out,
        )
    };
    let (la, loga, cka, out) = run("a");
    let (lb, logb, ckb, _) = run("b");
    assert_eq!(la, lb);
    assert_eq!(loga, logb);
    assert_eq!(cka, ckb);
    assert!(out.best.as_ref().unwrap().exists());

    let lines: Vec<serde_json::Value> = String::from_utf8(loga)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        for key in ["step", "lr", "loss", "loss_parts", "metrics"] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
        assert!(l["metrics"]["binary_auc"].is_number());
    }
}

#[test]
fn vae_phase_then_transferred_classifier_phase() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("d"), 4, 8);
    let mut vae = Model::new(ModelConfig::toy().with_head(HeadKind::VaeTwohead), 1).unwrap();
    let out = train(
        &mut vae,
        &data,
        Some(&data),
        &quick(Phase::Vae, 4),
        &dir.path().join("vae"),
    )
    .unwrap();
    let parts = &out.records.last().unwrap().loss_parts;
    assert!(["mse", "kl", "ce"].iter().all(|k| parts.contains_key(*k)));
    assert!(out.records.last().unwrap().metrics.contains_key("recon_mse"));

    let pre = load_checkpoint(&out.last).unwrap().to_model().unwrap();
    let mut cls = Model::new(ModelConfig::toy(), 9).unwrap();
    transfer_encoder(&pre.params, &mut cls.params).unwrap();
    train(
        &mut cls,
        &data,
        None,
        &quick(Phase::Classifier, 3),
        &dir.path().join("cls"),
    )
    .unwrap();
}

#[test]
fn phase_must_match_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("d"), 2, 1);
    let mut m = Model::new(ModelConfig::toy(), 0).unwrap();
    let err = train(&mut m, &data, None, &quick(Phase::Vae, 2), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn exploding_run_reports_step_and_parts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("d"), 2, 1);
    let mut m = Model::new(ModelConfig::toy(), 0).unwrap();
    let mut cfg = quick(Phase::Classifier, 50);
    cfg.schedule.base_lr = 1e35;
    cfg.schedule.end_lr = 1e35;
    cfg.clip_norm = 1e30;
    match train(&mut m, &data, None, &cfg, dir.path()) {
        Err(Error::Diverged { step, .. }) => assert!(step > 0 && step < 50),
        other => panic!("expected divergence, got {other:?}"),
    }
}

// ---------- ensembles ----------

#[test]
fn ensemble_average_examples() {
    let a = Tensor::from_f64([1, 2], &[0.6, 0.4]).unwrap();
    let b = Tensor::from_f64([1, 2], &[0.8, 0.2]).unwrap();
    assert_eq!(average_probabilities(&[a, b]).unwrap().data(), &[0.7f32, 0.3]);
}

#[test]
fn single_checkpoint_ensemble_equals_predict() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(ModelConfig::toy(), 11).unwrap();
    let path = dir.path().join("one.octc");
    save_checkpoint(&m, &path, 0, Default::default()).unwrap();
    let x = Tensor::randn([3, 3, 56, 56], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let e = ensemble_predict_checkpoints(&[path], &x).unwrap();
    assert_eq!(bits(&e), bits(&m.predict(&x).unwrap()));
    for i in 0..3 {
        assert!((e.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ensemble_rejects_mixed_class_counts() {
    let a = Model::new(ModelConfig::toy(), 1).unwrap();
    let mut cfg = ModelConfig::toy();
    cfg.num_classes = 3;
    let b = Model::new(cfg, 1).unwrap();
    let x = Tensor::zeros([1, 3, 56, 56]);
    assert!(matches!(ensemble_predict(&mut [a, b], &x), Err(Error::Config(_))));
}
