use std::collections::BTreeMap;

use spikegrad::training::{LossKind, Sample};
use spikegrad::{
    gen_random_spikes, init_states, run, run_traced, run_with_checkpointing, Edge, Error,
    ExecutionPlan, GraphSpec, InitMode, Layer, LifParams, NetworkGraph, NeuronState, ParamKey,
    Tensor,
};

fn lif() -> LifParams {
    LifParams::new(0.9, 0.8).unwrap()
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
    let p: BTreeMap<_, _> = g
        .params()
        .iter()
        .map(|(k, v)| {
            let d = v.data().iter().map(|x| x * c).collect();
            (*k, Tensor::new(v.shape().to_vec(), d).unwrap())
        })
        .collect();
    g.set_params(p).unwrap();
    g
}

fn bits_eq(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn identity_network_passes_input_through() {
    let g = NetworkGraph::<f64>::sequential(&[5], vec![Layer::flatten()], 0).unwrap();
    let x: Tensor<f64> = gen_random_spikes(5, 7, 0.5, 1).unwrap();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    assert!(st.is_empty());
    for plan in [
        ExecutionPlan::step_by_step(),
        ExecutionPlan::layer_by_layer(3),
    ] {
        let (_, rec) = run(&g, &plan, &x, &st).unwrap();
        assert!(bits_eq(rec.first_output(), &x));
    }
}

#[test]
fn schedulers_agree_on_mlp() {
    let g = scaled(mlp(12, 16, 4, 3), 2.0);
    let x: Tensor<f64> = gen_random_spikes(12, 20, 0.4, 2).unwrap();
    let st = init_states(&g, InitMode::Uniform { lo: 0.0, hi: 0.5 }, 5).unwrap();
    let (fa, a) = run(&g, &ExecutionPlan::step_by_step(), &x, &st).unwrap();
    assert!(a.first_output().data().iter().sum::<f64>() > 0.0);
    for u in [1, 2, 3, 8, 20] {
        let (fb, b) = run(&g, &ExecutionPlan::layer_by_layer(u), &x, &st).unwrap();
        assert!(a.first_output().max_abs_diff(b.first_output()).unwrap() < 1e-6);
        for (k, s) in &fa {
            assert!(s.u.max_abs_diff(&fb[k].u).unwrap() < 1e-6);
        }
    }
}

#[test]
fn schedulers_agree_on_cnn() {
    let g = scaled(
        NetworkGraph::<f64>::sequential(
            &[2, 7, 7],
            vec![
                Layer::conv(2, 3, 3, 2, 1),
                Layer::lif(&[3, 4, 4], lif()),
                Layer::flatten(),
                Layer::linear(48, 3),
                Layer::lif(&[3], lif()),
            ],
            4,
        )
        .unwrap(),
        3.0,
    );
    let x = gen_random_spikes::<f64>(98, 6, 0.5, 9)
        .unwrap()
        .reshaped(&[6, 2, 7, 7])
        .unwrap();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let s = Sample::labeled(x.clone(), 1, 3).unwrap();
    let head = LossKind::CrossEntropy.head(&s.target);
    let a =
        run_with_checkpointing(&g, &ExecutionPlan::step_by_step(), &x, &st, head.as_ref()).unwrap();
    let b = run_with_checkpointing(
        &g,
        &ExecutionPlan::layer_by_layer(4),
        &x,
        &st,
        head.as_ref(),
    )
    .unwrap();
    assert!(
        a.record
            .first_output()
            .max_abs_diff(b.record.first_output())
            .unwrap()
            < 1e-6
    );
    for (k, v) in &a.grads {
        assert!(v.max_abs_diff(&b.grads[k]).unwrap() < 1e-9, "{k:?}");
    }
}

/// Node 0 (LIF, thr 1) receives the input plus node 1's spikes from the
/// previous step; node 1 (LIF, thr 0.5) receives node 0's spikes.
fn feedback_pair() -> NetworkGraph<f64> {
    NetworkGraph::build(
        GraphSpec {
            input_shape: vec![1],
            nodes: vec![
                Layer::lif(&[1], lif()),
                Layer::lif(&[1], lif().with_thr(0.5)),
            ],
            edges: vec![Edge::forward(0, 1), Edge::delayed(1, 0)],
            inputs: vec![0],
            outputs: vec![0, 1],
        },
        0,
    )
    .unwrap()
}

fn hand_feedback(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut u0, mut i0, mut u1, mut i1, mut prev1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut s0s, mut s1s) = (Vec::new(), Vec::new());
    for &xt in x {
        i0 = 0.8 * i0 + (xt + prev1);
        let p0 = 0.9 * u0 + i0;
        let s0 = if p0 >= 1.0 { 1.0 } else { 0.0 };
        u0 = p0 - s0;
        i1 = 0.8 * i1 + s0;
        let p1 = 0.9 * u1 + i1;
        let s1 = if p1 >= 0.5 { 1.0 } else { 0.0 };
        u1 = p1 - 0.5 * s1;
        prev1 = s1;
        s0s.push(s0);
        s1s.push(s1);
    }
    (s0s, s1s)
}

#[test]
fn delayed_feedback_matches_hand_recurrence() {
    let g = feedback_pair();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    for xs in [[1.2, 0.0, 0.3], [0.6, 0.5, 0.0], [0.0, 0.0, 0.0]] {
        let x = Tensor::new(vec![3, 1], xs.to_vec()).unwrap();
        let (_, rec) = run(&g, &ExecutionPlan::step_by_step(), &x, &st).unwrap();
        let (s0, s1) = hand_feedback(&xs);
        assert_eq!(rec.output(0).unwrap().data(), s0.as_slice());
        assert_eq!(rec.output(1).unwrap().data(), s1.as_slice());
    }
    let (s0, _) = hand_feedback(&[1.2, 0.0, 0.3]);
    assert_eq!(s0, vec![1.0, 1.0, 1.0]);
}

#[test]
fn layer_mode_rejects_delays() {
    let g = feedback_pair();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let x = Tensor::zeros(&[3, 1]);
    assert!(matches!(
        run(&g, &ExecutionPlan::layer_by_layer(1), &x, &st),
        Err(Error::Plan(_))
    ));
}

#[test]
fn plan_validation() {
    let g = mlp(3, 4, 2, 0);
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let x = Tensor::zeros(&[5, 3]);
    let head = LossKind::CrossEntropy.head(&Tensor::one_hot(0, 2).unwrap());
    let bad = |p: ExecutionPlan| run_with_checkpointing(&g, &p, &x, &st, head.as_ref()).is_err();
    assert!(bad(ExecutionPlan::step_by_step().with_checkpoint(6)));
    assert!(bad(ExecutionPlan::step_by_step().with_checkpoint(0)));
    assert!(bad(ExecutionPlan::layer_by_layer(0)));
    assert!(run(
        &g,
        &ExecutionPlan::step_by_step(),
        &Tensor::zeros(&[5, 4]),
        &st
    )
    .is_err());
    assert!(run(&g, &ExecutionPlan::step_by_step(), &x, &BTreeMap::new()).is_err());
}

fn ckpt_case() -> (NetworkGraph<f64>, Tensor<f64>, Sample<f64>) {
    let g = scaled(mlp(10, 12, 3, 8), 2.0);
    let x: Tensor<f64> = gen_random_spikes(10, 100, 0.3, 4).unwrap();
    let s = Sample::labeled(x.clone(), 2, 3).unwrap();
    (g, x, s)
}

#[test]
fn checkpoint_every_t_equals_plain_run() {
    let (g, x, s) = ckpt_case();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let head = LossKind::CrossEntropy.head(&s.target);
    let a =
        run_with_checkpointing(&g, &ExecutionPlan::step_by_step(), &x, &st, head.as_ref()).unwrap();
    let b = run_with_checkpointing(
        &g,
        &ExecutionPlan::step_by_step().with_checkpoint(100),
        &x,
        &st,
        head.as_ref(),
    )
    .unwrap();
    assert_eq!(b.stats.segments, 1);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    for (k, v) in &a.grads {
        assert!(bits_eq(v, &b.grads[k]));
    }
}

#[test]
fn checkpointed_gradients_are_bit_identical() {
    let (g, x, s) = ckpt_case();
    let st = init_states(&g, InitMode::Uniform { lo: 0.0, hi: 0.8 }, 1).unwrap();
    let head = LossKind::CrossEntropy.head(&s.target);
    for plan in [
        ExecutionPlan::step_by_step(),
        ExecutionPlan::layer_by_layer(4),
    ] {
        let full = run_with_checkpointing(&g, &plan, &x, &st, head.as_ref()).unwrap();
        for k in [7, 10, 33] {
            let ck = run_with_checkpointing(&g, &plan.with_checkpoint(k), &x, &st, head.as_ref())
                .unwrap();
            assert_eq!(ck.stats.segments, 100usize.div_ceil(k));
            assert_eq!(full.loss.to_bits(), ck.loss.to_bits());
            for (key, v) in &full.grads {
                assert!(bits_eq(v, &ck.grads[key]), "k={k} {key:?}");
            }
            assert!(ck.stats.peak_live() < full.stats.peak_live());
        }
    }
}

#[test]
fn checkpointing_with_feedback_is_bit_identical() {
    let layers = vec![
        Layer::linear(4, 5),
        Layer::lif(&[5], lif()),
        Layer::linear(5, 3),
        Layer::lif(&[3], lif()),
    ];
    let g = scaled(
        NetworkGraph::<f64>::sequential_recurrent(&[4], layers, &[(3, 0)], 2).unwrap(),
        2.0,
    );
    let x: Tensor<f64> = gen_random_spikes(4, 30, 0.4, 6).unwrap();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let head = LossKind::SquaredError.head(&Tensor::new(vec![3], vec![3.0, 0.0, 5.0]).unwrap());
    let full =
        run_with_checkpointing(&g, &ExecutionPlan::step_by_step(), &x, &st, head.as_ref()).unwrap();
    let ck = run_with_checkpointing(
        &g,
        &ExecutionPlan::step_by_step().with_checkpoint(4),
        &x,
        &st,
        head.as_ref(),
    )
    .unwrap();
    assert!(full.grads.contains_key(&ParamKey::Edge(3)));
    for (k, v) in &full.grads {
        assert!(bits_eq(v, &ck.grads[k]), "{k:?}");
    }
}

#[test]
fn init_states_cover_stateful_nodes() {
    let g = mlp(3, 4, 2, 0);
    let a = init_states(&g, InitMode::Uniform { lo: 0.0, hi: 1.0 }, 3).unwrap();
    let b = init_states(&g, InitMode::Uniform { lo: 0.0, hi: 1.0 }, 3).unwrap();
    assert_eq!(a.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    assert!(a.iter().all(|(k, s)| s.value_eq(&b[k])));
    let z = init_states(&g, InitMode::Zeros, 3).unwrap();
    assert!(z
        .values()
        .all(|s| s.value_eq(&NeuronState::zeros(s.shape()))));
}

#[test]
fn trace_csv_lists_hidden_and_output_spikes() {
    let g = NetworkGraph::<f64>::sequential(
        &[1],
        vec![Layer::lif(&[1], lif()), Layer::lif(&[1], lif())],
        0,
    )
    .unwrap();
    let x = Tensor::new(vec![2, 1], vec![1.5, 0.0]).unwrap();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let (_, rec) = run_traced(&g, &ExecutionPlan::step_by_step(), &x, &st, true).unwrap();
    let mut buf = Vec::new();
    rec.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text,
        "t,node_id,neuron_idx,spike\n0,0,0,1\n0,1,0,1\n1,0,0,1\n1,1,0,1\n"
    );
}

#[test]
fn forward_is_deterministic_across_calls() {
    let g = mlp(6, 8, 3, 1);
    let x: Tensor<f64> = gen_random_spikes(6, 15, 0.5, 3).unwrap();
    let st = init_states(&g, InitMode::Zeros, 0).unwrap();
    let (_, a) = run(&g, &ExecutionPlan::step_by_step(), &x, &st).unwrap();
    let (_, b) = run(&g, &ExecutionPlan::step_by_step(), &x, &st).unwrap();
    assert!(bits_eq(a.first_output(), b.first_output()));
}
