use std::time::Instant;

use fedalign::model::{classify, encode, forward_full, ArchConfig, ModelParams};
use fedalign::numerics::{
    adam_step, cosine_lr, grad_check, grad_check_many, AdamState, LrSchedule, Tape, Tensor,
};
use fedalign::rng::stream_rng;
use fedalign::verify;
use proptest::prelude::*;

#[test]
fn gradient_suite_passes_within_budget() {
    let start = Instant::now();
    let report = verify::run_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(report.passed(), "failed: {:?}", report.failures());
    assert!(report.worst() < 1e-4);
    assert!(secs < 60.0, "{secs} s");
    for name in [
        "op/conv2d",
        "op/restyle",
        "loss/supervised_contrastive",
        "model/full_objective",
    ] {
        assert!(
            report.checks.iter().any(|c| c.name == name),
            "missing {name}"
        );
    }
}

/// Plain-loop Adam used as the reference.
fn adam_reference(p: &mut [f64], grads: &[Vec<f64>], lr: &[f64]) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr[t as usize - 1] * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_reference_over_many_steps() {
    let mut rng = stream_rng(3, &[]);
    let init = Tensor::randn(&[7], 1.0, &mut rng);
    let grads: Vec<Vec<f64>> = (0..25)
        .map(|_| Tensor::randn(&[7], 1.0, &mut rng).into_data())
        .collect();
    let sched = LrSchedule::new(0.01, 25).unwrap();
    let lrs: Vec<f64> = (0..25).map(|t| cosine_lr(t, &sched).unwrap()).collect();

    let mut params = vec![init.clone()];
    let mut state = AdamState::new(&params);
    for (g, &lr) in grads.iter().zip(&lrs) {
        adam_step(&mut params, &[Tensor::vector(g.clone())], &mut state, lr).unwrap();
    }
    let mut reference = init.into_data();
    adam_reference(&mut reference, &grads, &lrs);
    assert_eq!(params[0].data(), reference.as_slice());
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut p = vec![Tensor::vector(vec![1.0, 1.0])];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::vector(vec![3.0, -0.5])], &mut st, 0.1).unwrap();
    assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
    assert!((p[0].data()[1] - 1.1).abs() < 1e-7);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = vec![Tensor::vector(vec![1.0])];
    let mut st = AdamState::new(&p);
    let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st, 0.1).unwrap_err();
    assert!(matches!(err, fedalign::Error::Numeric { .. }));
    assert_eq!(p[0].data(), &[1.0]);
}

#[test]
fn cosine_endpoints() {
    let s = LrSchedule::new(0.001, 100).unwrap();
    assert_eq!(cosine_lr(0, &s).unwrap(), 0.001);
    assert!(cosine_lr(100, &s).unwrap().abs() < 1e-18);
    assert!((cosine_lr(50, &s).unwrap() - 0.0005).abs() < 1e-15);
    assert!(cosine_lr(101, &s).is_err());
    assert!(LrSchedule::new(0.1, 0).is_err());
}

#[test]
fn model_handles_single_sample_batches() {
    let mut rng = stream_rng(5, &[]);
    let params = ModelParams::init(ArchConfig::default(), &mut rng).unwrap();
    let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
    let (z, y) = forward_full(&params, &x).unwrap();
    assert_eq!(z.shape(), &[1, 16]);
    assert_eq!(y.shape(), &[1, 5]);
    assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_through_the_model_passes_gradcheck() {
    let mut rng = stream_rng(6, &[]);
    let arch = ArchConfig::with_classes(3);
    let params = ModelParams::init(arch, &mut rng).unwrap();
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    let labels = [0, 2, 1, 2];
    // Checked with respect to the input image: every layer is exercised and
    // the smooth loss keeps the test away from ReLU kinks at this seed.
    let err = grad_check(
        |t, xv| {
            let b = params.bind(t, false);
            let tr = b.encode(t, xv, None)?;
            let y = b.classify(t, tr.z)?;
            fedalign::losses::cross_entropy_on(t, y, &labels)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn small(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    // Kept away from zero so no product collapses to a vanishing gradient.
    prop::collection::vec(prop_oneof![-2.0..-0.1f64, 0.1..2.0f64], n)
        .prop_map(move |v| Tensor::new(shape.to_vec(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosine_is_non_increasing(lr in 0.0..1.0f64, total in 1u64..500) {
        let s = LrSchedule::new(lr, total).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let v = cosine_lr(t, &s).unwrap();
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), shift in 1usize..4) {
        let mut rng = stream_rng(seed, &[]);
        let params = ModelParams::init(ArchConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let xp = Tensor::stack(&perm.iter().map(|&i| x.index_outer(i)).collect::<Vec<_>>()).unwrap();
        let z = encode(&params, &x, None).unwrap();
        let zp = encode(&params, &xp, None).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(zp.row(row), z.row(src));
        }
        let y = classify(&params, &z).unwrap();
        for i in 0..4 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_ops_pass_gradcheck(a in small(&[3, 4]), b in small(&[4, 2])) {
        let err = grad_check_many(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let s = t.log_softmax(m)?;
                let n = t.l2_normalize(s)?;
                let q = t.mul(n, s)?;
                let sg = t.sigmoid(q)?;
                t.mean(sg)
            },
            &[a, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn backward_of_sum_is_ones(a in small(&[2, 3])) {
        let mut tape = Tape::new();
        let v = tape.param(a);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));
    }
}
