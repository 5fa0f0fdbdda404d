use std::collections::BTreeMap;

use spikegrad::executor::SpikeRecord;
use spikegrad::training::gradcheck::{
    hand_unrolled_gradient, hard_oracle, rel_error, run_suite, smooth_suite,
};
use spikegrad::training::{fd_gradient, spike_count_ce_loss, write_metrics_csv};
use spikegrad::{
    gen_random_spikes, gen_toy, init_states, loss_and_grad, optimizer_step, train, Error,
    ExecutionPlan, InitMode, Layer, LifParams, LossKind, NetworkGraph, OptState, Optimizer,
    ParamKey, ParamMap, Sample, Tensor, TrainConfig,
};

fn lif() -> LifParams {
    LifParams::new(0.9, 0.8).unwrap()
}

fn record(data: Vec<f64>, t: usize, c: usize) -> SpikeRecord<f64> {
    SpikeRecord {
        steps: t,
        outputs: BTreeMap::from([(0, Tensor::new(vec![t, c], data).unwrap())]),
        hidden: BTreeMap::new(),
    }
}

fn mlp(n: usize, h: usize, o: usize, seed: u64) -> NetworkGraph<f64> {
    NetworkGraph::sequential(
        &[n],
        vec![
            Layer::linear(n, h),
            Layer::lif(&[h], lif()),
            Layer::linear(h, o),
            Layer::lif(&[o], lif()),
        ],
        seed,
    )
    .unwrap()
}

fn scaled(mut g: NetworkGraph<f64>, c: f64) -> NetworkGraph<f64> {
    let p: ParamMap<f64> = g
        .params()
        .iter()
        .map(|(k, v)| {
            (
                *k,
                Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect()).unwrap(),
            )
        })
        .collect();
    g.set_params(p).unwrap();
    g
}

fn max_rel(a: &ParamMap<f64>, b: &ParamMap<f64>) -> f64 {
    a.iter()
        .flat_map(|(k, v)| {
            v.data()
                .iter()
                .zip(b[k].data())
                .map(|(x, y)| rel_error(*x, *y))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn ce_loss_of_silent_output_is_ln2() {
    let r = record(vec![0.0; 6], 3, 2);
    for class in 0..2 {
        let l = spike_count_ce_loss(&r, &Tensor::one_hot(class, 2).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn ce_loss_of_ten_spikes() {
    let mut d = Vec::new();
    for _ in 0..10 {
        d.extend([1.0, 0.0]);
    }
    let l = spike_count_ce_loss(&record(d, 10, 2), &Tensor::one_hot(0, 2).unwrap()).unwrap();
    assert!((l - (-10f64).exp().ln_1p()).abs() < 1e-15);
}

#[test]
fn ce_loss_checks_class_count() {
    let r = record(vec![0.0; 6], 3, 2);
    assert!(matches!(
        spike_count_ce_loss(&r, &Tensor::one_hot(0, 3).unwrap()),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn ce_loss_gradient_is_softmax_minus_target() {
    let counts = [3.0, 1.0, 0.0];
    let target = Tensor::one_hot(1, 3).unwrap();
    let mut tape = spikegrad::Tape::new();
    let c = tape.param(&Tensor::new(vec![3], counts.to_vec()).unwrap());
    let l = tape.softmax_cross_entropy(&c, &target).unwrap();
    let g = tape.backward(&l).unwrap();
    let z: f64 = counts.iter().map(|v: &f64| v.exp()).sum();
    for j in 0..3 {
        let expect = counts[j].exp() / z - target.data()[j];
        let eps = 1e-6;
        let f = |d: f64| {
            let mut cc = counts;
            cc[j] += d;
            spike_count_ce_loss(&record(cc.to_vec(), 1, 3), &target).unwrap()
        };
        let num = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!((g.get(&c).unwrap().data()[j] - expect).abs() < 1e-12);
        assert!((num - expect).abs() < 1e-8);
    }
}

fn sample(n: usize, t: usize, seed: u64, class: usize, classes: usize) -> Sample<f64> {
    Sample::labeled(gen_random_spikes(n, t, 0.5, seed).unwrap(), class, classes).unwrap()
}

#[test]
fn identical_batch_equals_single_sample() {
    let g = scaled(mlp(5, 6, 3, 1), 2.0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let s = sample(5, 12, 3, 1, 3);
    let one = loss_and_grad(
        &g,
        &ExecutionPlan::step_by_step(),
        std::slice::from_ref(&s),
        &st,
        LossKind::CrossEntropy,
    )
    .unwrap();
    let four = loss_and_grad(
        &g,
        &ExecutionPlan::step_by_step(),
        &vec![s; 4],
        &st,
        LossKind::CrossEntropy,
    )
    .unwrap();
    assert!(max_rel(&one.grads, &four.grads) < 1e-12);
    assert!((one.loss - four.loss).abs() < 1e-12);
}

#[test]
fn batch_gradient_is_mean_of_samples() {
    let g = scaled(mlp(5, 6, 3, 1), 2.0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let (a, b) = (sample(5, 12, 3, 1, 3), sample(5, 12, 4, 2, 3));
    let plan = ExecutionPlan::step_by_step();
    let ga = loss_and_grad(
        &g,
        &plan,
        std::slice::from_ref(&a),
        &st,
        LossKind::CrossEntropy,
    )
    .unwrap();
    let gb = loss_and_grad(
        &g,
        &plan,
        std::slice::from_ref(&b),
        &st,
        LossKind::CrossEntropy,
    )
    .unwrap();
    let gab = loss_and_grad(&g, &plan, &[a, b], &st, LossKind::CrossEntropy).unwrap();
    for (k, v) in &gab.grads {
        for ((x, p), q) in v
            .data()
            .iter()
            .zip(ga.grads[k].data())
            .zip(gb.grads[k].data())
        {
            assert!((x - 0.5 * (p + q)).abs() < 1e-6);
        }
    }
    assert_eq!(gab.per_sample_loss, vec![ga.loss, gb.loss]);
}

#[test]
fn empty_batch_is_rejected() {
    let g = mlp(2, 2, 2, 0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    assert!(matches!(
        loss_and_grad(
            &g,
            &ExecutionPlan::step_by_step(),
            &[],
            &st,
            LossKind::CrossEntropy
        ),
        Err(Error::Validation { .. })
    ));
}

#[test]
fn batch_gradient_is_deterministic() {
    let g = scaled(mlp(5, 6, 3, 1), 2.0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let batch: Vec<_> = (0..8)
        .map(|i| sample(5, 10, i, (i % 3) as usize, 3))
        .collect();
    let plan = ExecutionPlan::step_by_step();
    let a = loss_and_grad(&g, &plan, &batch, &st, LossKind::CrossEntropy).unwrap();
    let b = loss_and_grad(&g, &plan, &batch, &st, LossKind::CrossEntropy).unwrap();
    for (k, v) in &a.grads {
        assert!(v
            .data()
            .iter()
            .zip(b.grads[k].data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn sgd_step_by_hand() {
    let p: ParamMap<f64> =
        BTreeMap::from([(ParamKey::Node(0), Tensor::new(vec![1], vec![1.0]).unwrap())]);
    let g: ParamMap<f64> =
        BTreeMap::from([(ParamKey::Node(0), Tensor::new(vec![1], vec![0.5]).unwrap())]);
    let out = optimizer_step(&p, &g, &mut OptState::default(), &Optimizer::Sgd, 0.1).unwrap();
    assert!((out[&ParamKey::Node(0)].data()[0] - 0.95).abs() < 1e-15);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let p: ParamMap<f64> = BTreeMap::from([(
        ParamKey::Node(0),
        Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
    )]);
    let g: ParamMap<f64> = BTreeMap::from([(ParamKey::Node(0), Tensor::zeros(&[3]))]);
    for opt in [Optimizer::Sgd, Optimizer::adam()] {
        let out = optimizer_step(&p, &g, &mut OptState::default(), &opt, 0.1).unwrap();
        assert!(out[&ParamKey::Node(0)].value_eq(&p[&ParamKey::Node(0)]));
    }
}

#[test]
fn adam_first_step_by_hand() {
    let lr = 1e-3;
    let p: ParamMap<f64> = BTreeMap::from([(
        ParamKey::Node(0),
        Tensor::new(vec![2], vec![0.3, -0.7]).unwrap(),
    )]);
    let g: ParamMap<f64> = BTreeMap::from([(ParamKey::Node(0), Tensor::ones(&[2]))]);
    let out = optimizer_step(&p, &g, &mut OptState::default(), &Optimizer::adam(), lr).unwrap();
    // m_hat = 1, v_hat = 1 after bias correction.
    let step = lr * 1.0 / (1.0 + 1e-8);
    let w = out[&ParamKey::Node(0)].data();
    assert!((w[0] - (0.3 - step)).abs() < 1e-12);
    assert!((w[1] - (-0.7 - step)).abs() < 1e-12);
    assert!(((0.3 - w[0]) - lr).abs() < 1e-6);
}

#[test]
fn optimizer_rejects_mismatched_keys() {
    let p: ParamMap<f64> = BTreeMap::from([(ParamKey::Node(0), Tensor::ones(&[1]))]);
    let g: ParamMap<f64> = BTreeMap::from([(ParamKey::Node(1), Tensor::ones(&[1]))]);
    assert!(matches!(
        optimizer_step(&p, &g, &mut OptState::default(), &Optimizer::Sgd, 0.1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn fd_matches_analytic_gradient_of_linear_model() {
    let mut g = NetworkGraph::<f64>::sequential(&[3], vec![Layer::linear(3, 2)], 0).unwrap();
    let w = Tensor::new(vec![3, 2], vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.6]).unwrap();
    g.set_param(ParamKey::Node(0), w.clone()).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
    let target = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
    let batch = [Sample {
        input: x.clone(),
        target: target.clone(),
    }];
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let fd = fd_gradient(
        &g,
        &ExecutionPlan::step_by_step(),
        &batch,
        &st,
        LossKind::SquaredError,
        1e-6,
    )
    .unwrap();
    // L = 0.5 ||xsum W - y||^2, dL/dW = xsum^T (xsum W - y)
    let xsum = [2.0, 1.0, 1.0];
    let out: Vec<f64> = (0..2)
        .map(|j| (0..3).map(|i| xsum[i] * w.data()[i * 2 + j]).sum::<f64>() - target.data()[j])
        .collect();
    let fdw = fd[&ParamKey::Node(0)].data();
    for i in 0..3 {
        for j in 0..2 {
            assert!((fdw[i * 2 + j] - xsum[i] * out[j]).abs() < 1e-8);
        }
    }
    let ad = loss_and_grad(
        &g,
        &ExecutionPlan::step_by_step(),
        &batch,
        &st,
        LossKind::SquaredError,
    )
    .unwrap();
    assert!(max_rel(&ad.grads, &fd) < 1e-8);
}

#[test]
fn fd_of_dead_network_is_zero() {
    let mut g = mlp(3, 4, 2, 0);
    let zeros = g
        .params()
        .iter()
        .map(|(k, v)| (*k, Tensor::zeros(v.shape())))
        .collect();
    g.set_params(zeros).unwrap();
    let batch = [Sample::labeled(Tensor::zeros(&[4, 3]), 0, 2).unwrap()];
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let fd = fd_gradient(
        &g,
        &ExecutionPlan::step_by_step(),
        &batch,
        &st,
        LossKind::CrossEntropy,
        1e-6,
    )
    .unwrap();
    assert!(fd.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fd_rejects_nonpositive_eps() {
    let g = mlp(2, 2, 2, 0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let batch = [Sample::labeled(Tensor::zeros(&[2, 2]), 0, 2).unwrap()];
    for eps in [0.0, -1e-6, f64::NAN] {
        assert!(fd_gradient(
            &g,
            &ExecutionPlan::step_by_step(),
            &batch,
            &st,
            LossKind::CrossEntropy,
            eps
        )
        .is_err());
    }
}

#[test]
fn smooth_chain_ad_matches_fd() {
    let g = scaled(
        NetworkGraph::<f64>::sequential(
            &[3],
            vec![Layer::linear(3, 4), Layer::lif(&[4], lif())],
            5,
        )
        .unwrap(),
        2.0,
    )
    .smooth_twin(4.0)
    .unwrap();
    let batch = [sample(3, 5, 1, 2, 4)];
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let plan = ExecutionPlan::step_by_step();
    let ad = loss_and_grad(&g, &plan, &batch, &st, LossKind::CrossEntropy).unwrap();
    let fd = fd_gradient(&g, &plan, &batch, &st, LossKind::CrossEntropy, 1e-6).unwrap();
    assert!(max_rel(&ad.grads, &fd) < 1e-4);
}

#[test]
fn smooth_suite_passes_for_several_seeds() {
    for seed in [1, 2] {
        let r = smooth_suite(seed, 1e-6).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.entries.len() >= 6);
    }
}

#[test]
fn hard_oracle_matches_hand_chain_rule() {
    let r = hard_oracle().unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.hand.abs() > 0.1);
}

#[test]
fn hand_oracle_is_zero_without_drive() {
    assert_eq!(hand_unrolled_gradient(0.0, &[1.0, 1.0, 1.0], 0.0), 0.0);
}

#[test]
fn full_suite_report() {
    let r = run_suite(0, 1e-6).unwrap();
    assert!(r.passed());
    let text = r.smooth.to_string();
    assert!(text.contains("PASS"));
}

fn toy_config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: lr,
        optimizer: Optimizer::adam(),
        seed: 3,
        plan: ExecutionPlan::step_by_step(),
        init: InitMode::Zeros,
        loss: LossKind::CrossEntropy,
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data: Vec<Sample<f64>> = gen_toy(3, 9, 8, 4, 0).unwrap();
    let g = mlp(9, 6, 3, 2);
    let (trained, m) = train(&g, &data, &toy_config(0.0, 3)).unwrap();
    for (k, v) in g.params() {
        assert!(v.value_eq(trained.param(*k).unwrap()));
    }
    assert!(m.windows(2).all(|w| w[0].mean_loss == w[1].mean_loss));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data: Vec<Sample<f64>> = gen_toy(3, 9, 8, 6, 0).unwrap();
    let g = mlp(9, 6, 3, 2);
    let cfg = toy_config(1e-2, 4);
    let (ga, a) = train(&g, &data, &cfg).unwrap();
    let (gb, b) = train(&g, &data, &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
        assert_eq!(x.accuracy, y.accuracy);
    }
    for (k, v) in ga.params() {
        assert!(v.value_eq(gb.param(*k).unwrap()));
    }
}

#[test]
fn divergence_names_epoch_and_batch() {
    let mut g = NetworkGraph::<f64>::sequential(&[2], vec![Layer::linear(2, 2)], 0).unwrap();
    g.set_param(ParamKey::Node(0), Tensor::full(&[2, 2], 1e200))
        .unwrap();
    let data = vec![Sample {
        input: Tensor::ones(&[3, 2]),
        target: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
    }];
    let mut cfg = toy_config(0.1, 2);
    cfg.loss = LossKind::SquaredError;
    match train(&g, &data, &cfg) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("epoch 0, batch 0"), "{msg}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let data: Vec<Sample<f64>> = gen_toy(2, 4, 3, 2, 0).unwrap();
    let g = mlp(4, 3, 2, 0);
    let mut cfg = toy_config(-1.0, 1);
    assert!(train(&g, &data, &cfg).is_err());
    cfg.learning_rate = 0.1;
    cfg.batch_size = 0;
    assert!(train(&g, &data, &cfg).is_err());
    cfg.batch_size = 2;
    assert!(train(&g, &[], &cfg).is_err());
}

#[test]
fn training_with_checkpointing_matches_plain() {
    let data: Vec<Sample<f64>> = gen_toy(3, 9, 10, 3, 1).unwrap();
    let g = mlp(9, 6, 3, 2);
    let plain = toy_config(1e-2, 2);
    let mut ck = plain.clone();
    ck.plan = ExecutionPlan::step_by_step().with_checkpoint(3);
    let (_, a) = train(&g, &data, &plain).unwrap();
    let (_, b) = train(&g, &data, &ck).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
    }
}

#[test]
fn metrics_csv_header() {
    let data: Vec<Sample<f64>> = gen_toy(2, 4, 3, 2, 0).unwrap();
    let (_, m) = train(&mlp(4, 3, 2, 0), &data, &toy_config(1e-2, 2)).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,accuracy,wall_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn train_config_json_defaults() {
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"epochs": 2, "batch_size": 4, "learning_rate": 0.001}"#).unwrap();
    assert_eq!(cfg.optimizer, Optimizer::adam());
    assert_eq!(cfg.plan, ExecutionPlan::step_by_step());
    assert_eq!(cfg.loss, LossKind::CrossEntropy);
}
