use spikegrad::neurons::{lif_smooth_step, lif_step};
use spikegrad::{
    init_state, Error, InitMode, LifParams, NeuronState, ResetMode, SurrogateFn, SurrogateKind,
    Tape, Tensor,
};

fn v(data: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![data.len()], data.to_vec()).unwrap()
}

fn state(u: &[f64], i: &[f64]) -> NeuronState<f64> {
    NeuronState {
        u: v(u),
        i: v(i),
        s: Tensor::zeros(&[u.len()]),
    }
}

fn params() -> LifParams {
    LifParams::new(0.9, 0.8).unwrap()
}

#[test]
fn zero_fixed_point() {
    let mut tape = Tape::new();
    let (st, s) = lif_step(&mut tape, &state(&[0.], &[0.]), &v(&[0.]), &params()).unwrap();
    assert_eq!(
        (st.u.data(), st.i.data(), s.data()),
        (&[0.][..], &[0.][..], &[0.][..])
    );
}

#[test]
fn spike_and_subtractive_reset() {
    let mut tape = Tape::new();
    let (st, s) = lif_step(&mut tape, &state(&[0.], &[0.]), &v(&[1.5]), &params()).unwrap();
    assert_eq!(st.i.data(), &[1.5]);
    assert_eq!(s.data(), &[1.]);
    assert_eq!(st.u.data(), &[0.5]);
}

#[test]
fn reset_to_zero() {
    let p = params().with_reset(ResetMode::ToZero);
    let mut tape = Tape::new();
    let (st, s) = lif_step(&mut tape, &state(&[0.], &[0.]), &v(&[1.5]), &p).unwrap();
    assert_eq!(s.data(), &[1.]);
    assert_eq!(st.u.data(), &[0.]);
}

#[test]
fn decay_without_spike() {
    let mut tape = Tape::new();
    let (st, s) = lif_step(&mut tape, &state(&[0.5], &[0.]), &v(&[0.]), &params()).unwrap();
    assert!((st.u.data()[0] - 0.45).abs() < 1e-15);
    assert_eq!(s.data(), &[0.]);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let err = lif_step(
        &mut tape,
        &state(&[0., 0.], &[0., 0.]),
        &v(&[1.]),
        &params(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn params_are_validated() {
    assert!(LifParams::new(1.0, 0.5).is_err());
    assert!(LifParams::new(0.5, 0.0).is_err());
    assert!(params().with_thr(0.0).validate().is_err());
    assert!(SurrogateFn::new(SurrogateKind::Arctan, -1.0).is_err());
}

#[test]
fn spikes_are_binary() {
    let mut tape = Tape::new();
    let mut st = state(&[0.; 5], &[0.; 5]);
    for t in 0..20 {
        let x = v(&[-3.0, 0.2 * t as f64, 1e3, 0.999, 1.0]);
        let (next, s) = lif_step(&mut tape, &st, &x, &params()).unwrap();
        assert!(s.data().iter().all(|&b| b == 0.0 || b == 1.0));
        st = next;
    }
}

#[test]
fn smooth_step_at_zero_is_zero() {
    let p =
        params().with_surrogate(SurrogateFn::new(SurrogateKind::PiecewiseLinear, 10.0).unwrap());
    let mut tape = Tape::new();
    let (st, a) =
        lif_smooth_step(&mut tape, &state(&[0.; 3], &[0.; 3]), &v(&[0.; 3]), &p, 5.0).unwrap();
    assert!(a.data().iter().all(|&x| x == 0.0));
    assert!(st.u.data().iter().all(|&x| x == 0.0));
    for kind in [
        SurrogateKind::Superspike,
        SurrogateKind::SigmoidDerivative,
        SurrogateKind::Arctan,
    ] {
        let p = params().with_surrogate(SurrogateFn::new(kind, 10.0).unwrap());
        let (_, a) = lif_smooth_step(&mut tape, &state(&[0.], &[0.]), &v(&[0.]), &p, 1e4).unwrap();
        assert!(a.data()[0] < 1e-4, "{kind:?}: {}", a.data()[0]);
    }
}

/// Inputs chosen so that every pre-reset potential stays at least 0.1 from
/// the threshold.
fn margin_inputs() -> Vec<Tensor<f64>> {
    vec![v(&[0.3, 2.5, 0.0, -0.5]); 4]
}

fn compare_hard_and_smooth(p: LifParams, sharpness: f64, tol: f64) {
    let (mut tape_h, mut tape_s) = (Tape::new(), Tape::new());
    let mut hard = state(&[0.; 4], &[0.; 4]);
    let mut smooth = hard.clone();
    for x in margin_inputs() {
        let (h, sh) = lif_step(&mut tape_h, &hard, &x, &p).unwrap();
        let (s, ss) = lif_smooth_step(&mut tape_s, &smooth, &x, &p, sharpness).unwrap();
        let i = h.i.data();
        for (k, (&a, &b)) in sh.data().iter().zip(ss.data()).enumerate() {
            let pre = 0.9 * hard.u.data()[k] + i[k];
            assert!((pre - 1.0).abs() > 0.1, "input not bounded away: {pre}");
            assert!((a - b).abs() < tol, "{a} vs {b} at k={k}");
        }
        hard = h;
        smooth = s;
    }
}

#[test]
fn smooth_twin_recovers_hard_step_piecewise_linear() {
    let p =
        params().with_surrogate(SurrogateFn::new(SurrogateKind::PiecewiseLinear, 10.0).unwrap());
    compare_hard_and_smooth(p, 20.0, 1e-6);
}

#[test]
fn smooth_twin_converges_for_sigmoid() {
    let p =
        params().with_surrogate(SurrogateFn::new(SurrogateKind::SigmoidDerivative, 10.0).unwrap());
    compare_hard_and_smooth(p, 200.0, 1e-6);
}

#[test]
fn smooth_twin_error_shrinks_with_sharpness() {
    for kind in [SurrogateKind::Superspike, SurrogateKind::Arctan] {
        let p = params().with_surrogate(SurrogateFn::new(kind, 10.0).unwrap());
        let x = v(&[0.8, 1.3]);
        let gap = |k: f64| {
            let mut tape = Tape::new();
            let (_, a) = lif_smooth_step(&mut tape, &state(&[0.; 2], &[0.; 2]), &x, &p, k).unwrap();
            (a.data()[0] - 0.0).abs().max((a.data()[1] - 1.0).abs())
        };
        assert!(gap(100.0) < gap(10.0));
        assert!(gap(1e4) < 1e-3);
    }
}

/// L = sum of activations over a 5-step, 4-neuron smooth chain with input
/// weights `w`.
fn chain_loss(tape: &mut Tape<f64>, w: &Tensor<f64>, p: &LifParams) -> Tensor<f64> {
    let xs = [0.9, 0.1, 1.3, 0.0, 0.6];
    let mut st = state(&[0.; 4], &[0.; 4]);
    let mut acc = tape.constant(&Tensor::scalar(0.0));
    for x in xs {
        let xt = tape.scale(w, x).unwrap();
        let (next, a) = lif_smooth_step(tape, &st, &xt, p, 4.0).unwrap();
        let sq = tape.mul(&a, &a).unwrap();
        let s = tape.sum_all(&sq).unwrap();
        acc = tape.add(&acc, &s).unwrap();
        st = next;
    }
    acc
}

#[test]
fn smooth_chain_gradient_against_fd() {
    for kind in SurrogateKind::ALL {
        let p = params().with_surrogate(SurrogateFn::new(kind, 10.0).unwrap());
        let w0 = v(&[0.4, 1.1, -0.3, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let l = chain_loss(&mut tape, &w, &p);
        let g = tape.backward(&l).unwrap();
        let ad = g.get(&w).unwrap().data().to_vec();
        for j in 0..4 {
            let eps = 1e-6;
            let mut hi = w0.to_vec();
            let mut lo = w0.to_vec();
            hi[j] += eps;
            lo[j] -= eps;
            let f = |d: Vec<f64>| chain_loss(&mut Tape::new(), &v(&d), &p).item().unwrap();
            let num = (f(hi) - f(lo)) / (2.0 * eps);
            let rel = (ad[j] - num).abs() / ad[j].abs().max(num.abs()).max(1e-4);
            assert!(rel < 1e-4, "{kind:?} w{j}: {} vs {num}", ad[j]);
        }
    }
}

#[test]
fn init_zeros() {
    let st: NeuronState<f64> = init_state(3, InitMode::Zeros, 0).unwrap();
    for t in [&st.u, &st.i, &st.s] {
        assert_eq!(t.data(), &[0., 0., 0.]);
    }
}

#[test]
fn init_uniform_mean_and_range() {
    let st: NeuronState<f64> =
        init_state(1000, InitMode::Uniform { lo: 0.0, hi: 1.0 }, 42).unwrap();
    let mean = st.u.data().iter().sum::<f64>() / 1000.0;
    assert!((0.45..=0.55).contains(&mean), "{mean}");
    assert!(st.u.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    assert!(st.s.data().iter().all(|&x| x == 0.0));
}

#[test]
fn init_is_deterministic() {
    let mode = InitMode::Uniform { lo: -1.0, hi: 2.0 };
    let a: NeuronState<f64> = init_state(64, mode, 7).unwrap();
    let b: NeuronState<f64> = init_state(64, mode, 7).unwrap();
    assert!(a.value_eq(&b));
    let c: NeuronState<f64> = init_state(64, mode, 8).unwrap();
    assert!(!a.value_eq(&c));
}

#[test]
fn init_rejects_empty_interval() {
    let r = init_state::<f64>(3, InitMode::Uniform { lo: 1.0, hi: 1.0 }, 0);
    assert!(matches!(r, Err(Error::Validation { .. })));
}

#[test]
fn zero_input_decay_is_geometric() {
    let p = params();
    let mut tape = Tape::new();
    let u0 = 0.8;
    let mut st = state(&[u0], &[0.]);
    let mut expect = u0;
    for _ in 0..50 {
        let (next, s) = lif_step(&mut tape, &st, &v(&[0.]), &p).unwrap();
        expect *= 0.9;
        assert_eq!(next.u.data()[0], expect);
        assert_eq!(s.data()[0], 0.0);
        st = next;
    }
}
