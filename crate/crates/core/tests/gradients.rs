//! Analytic gradients against central finite differences at f64.

use corrkd::datasets::ModalitySample;
use corrkd::losses::{
    cpd_loss, cpd_loss_with_grad, random_derangement, rcd_loss_with_grad, scd_loss, scd_loss_with_grad, task_loss,
    task_loss_with_grad,
};
use corrkd::model::{FusionNet, FusionNetConfig};
use corrkd::nn::{softmax_rows, Params};
use corrkd::oracle::central_difference;
use corrkd::seed;
use corrkd::statnet::ResponseCritics;
use ndarray::{Array1, Array2};
use rand::Rng;

const N: usize = 4;
const DIM: usize = 6;
const K: usize = 3;
const RTOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn matrix(rng: &mut seed::Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = RTOL * a.abs().max(n.abs()) + 1e-8;
        assert!((a - n).abs() <= tol, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

fn labels(rng: &mut seed::Rng) -> Vec<usize> {
    // At least two classes present, one of them twice.
    let mut y = vec![0, 1, 1, 2];
    y.rotate_left(rng.random_range(0..N));
    y
}

fn reshape(v: &[f64], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), v.to_vec()).unwrap()
}

#[test]
fn scd_gradient() {
    for s in 0..5 {
        let mut rng = seed::rng(100 + s, &[]);
        let hs = matrix(&mut rng, N, DIM, 0.5);
        let ht = matrix(&mut rng, N, DIM, 0.5);
        let (_, g) = scd_loss_with_grad(hs.view(), ht.view(), 1.2).unwrap();
        let num = central_difference(
            |v| scd_loss(reshape(v, N, DIM).view(), ht.view(), 1.2).unwrap(),
            hs.as_slice().unwrap(),
            STEP,
        );
        assert_close(g.as_slice().unwrap(), &num, &format!("scd seed {s}"));
    }
}

#[test]
fn cpd_gradient() {
    for s in 0..5 {
        let mut rng = seed::rng(200 + s, &[]);
        let hs = matrix(&mut rng, N, DIM, 1.0);
        let ht = matrix(&mut rng, N, DIM, 1.0);
        let y = labels(&mut rng);
        let out = cpd_loss_with_grad(hs.view(), ht.view(), &y).unwrap();
        let num = central_difference(
            |v| cpd_loss(reshape(v, N, DIM).view(), ht.view(), &y).unwrap(),
            hs.as_slice().unwrap(),
            STEP,
        );
        assert_close(out.grad.as_slice().unwrap(), &num, &format!("cpd seed {s}"));
    }
}

#[test]
fn rcd_gradient_wrt_student_logits_and_critics() {
    for s in 0..5 {
        let mut rng = seed::rng(300 + s, &[]);
        let probs_t = softmax_rows(matrix(&mut rng, N, K, 2.0).view());
        let logits = matrix(&mut rng, N, K, 2.0);
        let y = labels(&mut rng);
        let critics = ResponseCritics::<f64>::new(K, 16, 2, s).unwrap();
        let perm = random_derangement(N, &mut rng);
        let value = |lg: &Array2<f64>, c: &ResponseCritics<f64>| {
            let mut scratch = c.zeros_like();
            rcd_loss_with_grad(probs_t.view(), lg.view(), &y, c, &perm, false, 1.0, &mut scratch)
                .unwrap()
                .value
        };
        let mut cg = critics.zeros_like();
        let out = rcd_loss_with_grad(probs_t.view(), logits.view(), &y, &critics, &perm, false, 1.0, &mut cg).unwrap();
        let num = central_difference(|v| value(&reshape(v, N, K), &critics), logits.as_slice().unwrap(), STEP);
        assert_close(out.d_logits.as_slice().unwrap(), &num, &format!("rcd logits seed {s}"));

        let flat = critics.flatten();
        let num_c = central_difference(
            |v| {
                let mut c = critics.clone();
                c.assign_flat(v);
                value(&logits, &c)
            },
            &flat,
            STEP,
        );
        assert_close(&cg.flatten(), &num_c, &format!("rcd critics seed {s}"));
    }
}

#[test]
fn rcd_gradient_with_renormalized_ntcr() {
    let mut rng = seed::rng(350, &[]);
    let probs_t = softmax_rows(matrix(&mut rng, N, K, 2.0).view());
    let logits = matrix(&mut rng, N, K, 2.0);
    let y = labels(&mut rng);
    let critics = ResponseCritics::<f64>::new(K, 16, 2, 7).unwrap();
    let perm = random_derangement(N, &mut rng);
    let value = |lg: &Array2<f64>| {
        let mut scratch = critics.zeros_like();
        rcd_loss_with_grad(probs_t.view(), lg.view(), &y, &critics, &perm, true, 1.0, &mut scratch)
            .unwrap()
            .value
    };
    let mut cg = critics.zeros_like();
    let out = rcd_loss_with_grad(probs_t.view(), logits.view(), &y, &critics, &perm, true, 1.0, &mut cg).unwrap();
    let num = central_difference(|v| value(&reshape(v, N, K)), logits.as_slice().unwrap(), STEP);
    assert_close(out.d_logits.as_slice().unwrap(), &num, "rcd renormalized");
}

#[test]
fn task_gradient() {
    for s in 0..5 {
        let mut rng = seed::rng(400 + s, &[]);
        let logits = matrix(&mut rng, N, K, 3.0);
        let y = labels(&mut rng);
        let (_, g) = task_loss_with_grad(logits.view(), &y).unwrap();
        let num = central_difference(
            |v| task_loss(reshape(v, N, K).view(), &y).unwrap(),
            logits.as_slice().unwrap(),
            STEP,
        );
        assert_close(g.as_slice().unwrap(), &num, &format!("task seed {s}"));
    }
}

fn tiny_net() -> FusionNetConfig {
    FusionNetConfig {
        d: 4,
        num_heads: 2,
        num_layers: 2,
        ffn_dim: 8,
        dropout: 0.0,
        num_classes: K,
        conv_kernel: 3,
        input_dims: [3, 2, 2],
    }
}

fn sample(rng: &mut seed::Rng) -> ModalitySample<f64> {
    let dims = [3, 2, 2];
    ModalitySample {
        id: "s".into(),
        label: 1,
        x: std::array::from_fn(|m| matrix(rng, 5, dims[m], 1.0)),
    }
}

/// `L = <probe_h, H> + <probe_l, logits>` through the whole network.
#[test]
fn network_parameter_gradient() {
    let mut rng = seed::rng(500, &[]);
    let net = FusionNet::<f64>::new(tiny_net(), 3).unwrap();
    let x = sample(&mut rng);
    let probe_h = Array1::from_shape_fn(12, |_| rng.random_range(-1.0..1.0));
    let probe_l = Array1::from_shape_fn(K, |_| rng.random_range(-1.0..1.0));
    let objective = |n: &FusionNet<f64>| {
        let (h, r) = n.forward_sample(&x).unwrap();
        h.h.dot(&probe_h) + r.logits.dot(&probe_l)
    };
    let (trace, _) = net.forward_trace(&x, None).unwrap();
    let mut grad = net.zeros_like();
    net.backward(&trace, &probe_h, &probe_l, &mut grad);
    let flat = net.flatten();
    let num = central_difference(
        |v| {
            let mut n = net.clone();
            n.assign_flat(v);
            objective(&n)
        },
        &flat,
        STEP,
    );
    assert_close(&grad.flatten(), &num, "network");
}

#[test]
fn every_parameter_tensor_receives_gradient() {
    let mut rng = seed::rng(501, &[]);
    let net = FusionNet::<f64>::new(tiny_net(), 4).unwrap();
    let x = sample(&mut rng);
    let (trace, _) = net.forward_trace(&x, None).unwrap();
    let mut grad = net.zeros_like();
    let d_h = Array1::from_elem(12, 0.3);
    let d_l = Array1::from_vec(vec![0.5, -0.2, 0.1]);
    net.backward(&trace, &d_h, &d_l, &mut grad);
    grad.visit("", &mut |name, v| {
        assert!(v.iter().any(|&g| g != 0.0), "{name} has an all-zero gradient");
    });
}
