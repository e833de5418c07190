//! Numeric self-checks of the loss functions against hand-computed values
//! and the plain-loop references in [`crate::oracle`]. Backs the
//! `check-losses` command.

use ndarray::{array, Array2};
use rand::Rng as _;

use crate::losses::*;
use crate::nn::Params;
use crate::optim::{Adam, AdamConfig};
use crate::oracle;
use crate::seed;
use crate::statnet::{ResponseCritics, StatNet, StatNetConfig};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

fn near(name: &'static str, value: f64, expected: f64, tol: f64) -> Check {
    Check {
        name,
        value,
        expected: format!("{expected:.6} ± {tol:e}"),
        pass: (value - expected).abs() <= tol,
    }
}

fn holds(name: &'static str, value: f64, expected: &str, pass: bool) -> Check {
    Check {
        name,
        value,
        expected: expected.into(),
        pass,
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn random_matrix(rng: &mut seed::Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

/// Trains a 2-input critic to maximise the JSD estimate on `(q, u)` and
/// returns the estimate on a fresh derangement.
pub fn trained_jsd(q: &Array2<f64>, u: &Array2<f64>, steps: usize, seed: u64) -> f64 {
    let cfg = StatNetConfig {
        input_dim: q.ncols() + u.ncols(),
        hidden_dim: 64,
        num_layers: 2,
    };
    let mut net = StatNet::<f64>::new(cfg, seed).expect("valid critic");
    let mut adam = Adam::new(AdamConfig::default(), 1e-2, net.num_params());
    let mut rng = seed::rng(seed, &[0x7121]);
    for _ in 0..steps {
        let perm = random_derangement(q.nrows(), &mut rng);
        let mut grad = net.zeros_like();
        jsd_mi_with_grad(q.view(), u.view(), &net, &perm, -1.0, &mut grad).expect("shapes match");
        adam.update(&mut net, &grad.flatten());
    }
    let perm = random_derangement(q.nrows(), &mut rng);
    jsd_mi_estimate(q.view(), u.view(), &net, &perm).expect("shapes match")
}

pub fn loss_checks() -> Vec<Check> {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();
    let mut rng = seed::rng(2024, &[]);

    let h = array![[0.0], [1.0]];
    out.push(near(
        "scd two-sample",
        scd_loss(h.view(), h.view(), 1.2).unwrap(),
        0.08,
        1e-12,
    ));
    let far = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
    out.push(near(
        "scd matched and far apart",
        scd_loss(far.view(), far.view(), 1.2).unwrap(),
        0.0,
        0.0,
    ));
    let (hs, ht) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 5, 4));
    out.push(near(
        "scd vs reference",
        scd_loss(hs.view(), ht.view(), 1.2).unwrap(),
        oracle::scd_reference(&rows(&hs), &rows(&ht), 1.2),
        1e-10,
    ));

    let p: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [3.0, -2.0]];
    let t = category_prototypes(p.view(), &[0, 0, 1]).unwrap();
    let c0 = t.prototype(0).unwrap();
    out.push(near(
        "prototype hand mean",
        (c0[0] - 0.5).abs().max((c0[1] - 0.5).abs()),
        0.0,
        0.0,
    ));
    let c1 = t.prototype(1).unwrap();
    out.push(near(
        "single-sample prototype",
        (c1[0] - 3.0).abs().max((c1[1] + 2.0).abs()),
        0.0,
        0.0,
    ));
    let swapped = array![[3.0, -2.0], [0.0, 1.0], [1.0, 0.0]];
    let t2 = category_prototypes(swapped.view(), &[1, 0, 0]).unwrap();
    out.push(holds("prototype order invariance", 0.0, "identical table", t2 == t));

    let half = PrototypeTable {
        categories: vec![0],
        prototypes: array![[0.5, 0.5]],
        counts: vec![2],
    };
    out.push(near(
        "cosine (1,0)·(.5,.5)",
        similarity_row(array![1.0, 0.0].view(), &half).0[0],
        std::f64::consts::FRAC_1_SQRT_2,
        1e-12,
    ));
    out.push(near(
        "cosine h = c",
        similarity_row(array![0.5, 0.5].view(), &half).0[0],
        1.0,
        1e-12,
    ));
    out.push(near(
        "cosine h = -c",
        similarity_row(array![-0.5, -0.5].view(), &half).0[0],
        -1.0,
        1e-12,
    ));
    let (zero, warned) = similarity_row(array![0.0, 0.0].view(), &half);
    out.push(holds(
        "cosine zero-norm guard",
        zero[0],
        "0 with one warning",
        zero[0] == 0.0 && warned == 1,
    ));

    let labels = [0, 1, 2, 0, 1];
    out.push(near(
        "cpd identical",
        cpd_loss(hs.view(), hs.view(), &labels).unwrap(),
        0.0,
        0.0,
    ));
    let mt = random_matrix(&mut rng, 5, 3);
    let ms = &mt + 0.1;
    out.push(near(
        "cpd uniform offset",
        cpd_from_similarities(ms.view(), mt.view()).unwrap(),
        0.1,
        1e-12,
    ));
    let base = cpd_loss(hs.view(), ht.view(), &labels).unwrap();
    let scaled = cpd_loss((&hs * 3.0).view(), (&ht * 0.5).view(), &labels).unwrap();
    out.push(near("cpd scale invariance", scaled, base, 1e-12));
    out.push(near(
        "cpd vs reference",
        base,
        oracle::cpd_reference(&rows(&hs), &rows(&ht), &labels),
        1e-12,
    ));

    let probs = array![0.7, 0.2, 0.1];
    let d0 = decouple_probs(probs.view(), 0).unwrap();
    out.push(holds(
        "decouple y=0",
        d0.tcr,
        "0.7 | (0.2, 0.1)",
        d0.tcr == 0.7 && d0.ntcr == array![0.2, 0.1],
    ));
    let d1 = decouple_probs(probs.view(), 1).unwrap();
    out.push(holds(
        "decouple y=1",
        d1.tcr,
        "0.2 | (0.7, 0.1)",
        d1.tcr == 0.2 && d1.ntcr == array![0.7, 0.1],
    ));
    out.push(holds("decouple round trip", 0.0, "exact", d1.reconstruct(1) == probs));

    let q = random_matrix(&mut rng, 6, 1);
    let u = random_matrix(&mut rng, 6, 1);
    let perm = random_derangement(6, &mut rng);
    let cfg = StatNetConfig::default();
    for (name, c, expect) in [
        ("jsd F = 0", 0.0, -2.0 * ln2),
        (
            "jsd F = 1",
            1.0,
            -(1.0 + (-1.0f64).exp()).ln() - (1.0 + 1.0f64.exp()).ln(),
        ),
    ] {
        let net = StatNet::constant(cfg.clone(), c).unwrap();
        out.push(near(
            name,
            jsd_mi_estimate(q.view(), u.view(), &net, &perm).unwrap(),
            expect,
            1e-9,
        ));
    }
    out.push(near(
        "jsd F = 1 closed form",
        -(1.0 + (-1.0f64).exp()).ln() - (1.0 + 1.0f64.exp()).ln(),
        -1.62652,
        1e-5,
    ));
    let random_net = StatNet::<f64>::new(cfg.clone(), 9).unwrap();
    let est = jsd_mi_estimate(q.view(), u.view(), &random_net, &perm).unwrap();
    out.push(holds("jsd upper bound 0", est, "<= 0", est <= 0.0));

    let pt = array![[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]];
    let ps = array![[0.5, 0.4, 0.1], [0.3, 0.3, 0.4], [0.2, 0.2, 0.6], [0.25, 0.5, 0.25]];
    let y = [0, 1, 2, 1];
    let mut zero_critics = ResponseCritics::<f64>::new(3, 64, 2, 0).unwrap();
    zero_critics.fill(0.0);
    out.push(near(
        "rcd zero critics",
        rcd_loss(pt.view(), ps.view(), &y, &zero_critics, 1, false).unwrap(),
        4.0 * ln2,
        1e-9,
    ));
    let critics = ResponseCritics::<f64>::new(3, 64, 2, 5).unwrap();
    let r = rcd_loss(pt.view(), ps.view(), &y, &critics, 1, false).unwrap();
    out.push(holds("rcd non-negative", r, ">= 0", r >= 0.0));

    let n = 128;
    let qa = Array2::from_shape_fn((n, 1), |_| rng.random_range(0.0..1.0));
    let ind = Array2::from_shape_fn((n, 1), |_| rng.random_range(0.0..1.0));
    let correlated = trained_jsd(&qa, &qa, 300, 11);
    let independent = trained_jsd(&qa, &ind, 300, 11);
    out.push(holds(
        "trained jsd: correlated > independent",
        correlated - independent,
        "> 0",
        correlated > independent,
    ));

    let uniform = Array2::<f64>::zeros((3, 4));
    out.push(near(
        "task uniform K=4",
        task_loss(uniform.view(), &[0, 1, 3]).unwrap(),
        4.0f64.ln(),
        1e-12,
    ));
    let confident = array![[60.0, 0.0, 0.0]];
    out.push(near(
        "task confident",
        task_loss(confident.view(), &[0]).unwrap(),
        0.0,
        1e-12,
    ));
    let logits = random_matrix(&mut rng, 5, 3) * 4.0;
    let probs: Vec<Vec<f64>> = logits
        .outer_iter()
        .map(|r| oracle::softmax_reference(&r.to_vec()))
        .collect();
    out.push(near(
        "task vs reference",
        task_loss(logits.view(), &labels).unwrap(),
        oracle::cross_entropy_reference(&probs, &labels),
        1e-6,
    ));

    let w = LossWeights::default();
    out.push(near(
        "total (1,2,3,4)",
        total_loss([1.0, 2.0, 3.0, 4.0], &w).unwrap().total,
        10.0,
        1e-12,
    ));
    out.push(near("total zeros", total_loss([0.0; 4], &w).unwrap().total, 0.0, 0.0));
    out.push(near(
        "total task-only weights",
        total_loss([1.5, 2.0, 3.0, 4.0], &LossWeights::task_only())
            .unwrap()
            .total,
        1.5,
        0.0,
    ));
    let nan = total_loss([1.0, f64::NAN, 0.0, 0.0], &w);
    out.push(holds(
        "total names non-finite component",
        f64::NAN,
        "error naming scd",
        matches!(nan, Err(crate::Error::NonFinite { ref component }) if component == "scd"),
    ));
    out
}

/// Worst ratio of `|analytic - numeric|` to `rtol * max(|a|, |n|) + 1e-8`
/// over the entries; at most 1 means every entry is within tolerance.
fn gradient_excess(analytic: &[f64], numeric: &[f64], rtol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (rtol * a.abs().max(n.abs()) + 1e-8))
        .fold(0.0, f64::max)
}

/// Analytic loss gradients against central differences on random batches
/// `N = 4, dim = 6, K = 3`, over `seeds` seeds each. One row per loss; the
/// value is the worst [`gradient_excess`] over all seeds.
pub fn gradient_checks(seeds: u64) -> Vec<Check> {
    const N: usize = 4;
    const DIM: usize = 6;
    const K: usize = 3;
    const RTOL: f64 = 1e-4;
    const STEP: f64 = 1e-6;
    let shape = |v: &[f64], c: usize| Array2::from_shape_vec((v.len() / c, c), v.to_vec()).expect("shape");
    let labels = |rng: &mut seed::Rng| {
        let mut y = vec![0, 1, 1, 2];
        y.rotate_left(rng.random_range(0..N));
        y
    };
    let mut worst = [0.0f64; 5];
    for s in 0..seeds {
        let mut rng = seed::rng(0x6AAD, &[s]);
        let hs = random_matrix(&mut rng, N, DIM);
        let ht = random_matrix(&mut rng, N, DIM);
        let y = labels(&mut rng);

        let (_, g) = scd_loss_with_grad(hs.view(), ht.view(), 1.2).expect("scd");
        let num = oracle::central_difference(
            |v| scd_loss(shape(v, DIM).view(), ht.view(), 1.2).unwrap(),
            hs.as_slice().unwrap(),
            STEP,
        );
        worst[0] = worst[0].max(gradient_excess(g.as_slice().unwrap(), &num, RTOL));

        let out = cpd_loss_with_grad(hs.view(), ht.view(), &y).expect("cpd");
        let num = oracle::central_difference(
            |v| cpd_loss(shape(v, DIM).view(), ht.view(), &y).unwrap(),
            hs.as_slice().unwrap(),
            STEP,
        );
        worst[1] = worst[1].max(gradient_excess(out.grad.as_slice().unwrap(), &num, RTOL));

        let probs_t = crate::nn::softmax_rows((random_matrix(&mut rng, N, K) * 2.0).view());
        let logits = random_matrix(&mut rng, N, K) * 2.0;
        let critics = ResponseCritics::<f64>::new(K, 16, 2, s).expect("critics");
        let perm = random_derangement(N, &mut rng);
        let value = |lg: &Array2<f64>, c: &ResponseCritics<f64>| {
            let mut scratch = c.zeros_like();
            rcd_loss_with_grad(probs_t.view(), lg.view(), &y, c, &perm, false, 1.0, &mut scratch)
                .unwrap()
                .value
        };
        let mut cg = critics.zeros_like();
        let out =
            rcd_loss_with_grad(probs_t.view(), logits.view(), &y, &critics, &perm, false, 1.0, &mut cg).expect("rcd");
        let num = oracle::central_difference(|v| value(&shape(v, K), &critics), logits.as_slice().unwrap(), STEP);
        worst[2] = worst[2].max(gradient_excess(out.d_logits.as_slice().unwrap(), &num, RTOL));
        let num = oracle::central_difference(
            |v| {
                let mut c = critics.clone();
                c.assign_flat(v);
                value(&logits, &c)
            },
            &critics.flatten(),
            STEP,
        );
        worst[3] = worst[3].max(gradient_excess(&cg.flatten(), &num, RTOL));

        let (_, g) = task_loss_with_grad(logits.view(), &y).expect("task");
        let num = oracle::central_difference(
            |v| task_loss(shape(v, K).view(), &y).unwrap(),
            logits.as_slice().unwrap(),
            STEP,
        );
        worst[4] = worst[4].max(gradient_excess(g.as_slice().unwrap(), &num, RTOL));
    }
    let names = [
        "scd gradient",
        "cpd gradient",
        "rcd gradient (logits)",
        "rcd gradient (critics)",
        "task gradient",
    ];
    names
        .iter()
        .zip(worst)
        .map(|(&name, w)| holds(name, w, "worst excess <= 1", w <= 1.0))
        .collect()
}

/// Fixed-width table, one row per check.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = format!("{:<width$}  {:>14}  {:<22}  result\n", "check", "value", "expected");
    for c in checks {
        s.push_str(&format!(
            "{:<width$}  {:>14.8}  {:<22}  {}\n",
            c.name,
            c.value,
            c.expected,
            if c.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_pass() {
        let checks = super::loss_checks();
        let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn gradients_pass() {
        let checks = super::gradient_checks(2);
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }
}
