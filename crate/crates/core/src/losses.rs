//! Training objectives: cross-entropy, sample-level contrastive distillation,
//! category-prototype distillation, and response-decoupled mutual-information
//! distillation, plus their weighted total.
//!
//! Batches are row-major matrices: row `i` is sample `i`. Teacher-side inputs
//! are constants; every `*_with_grad` returns gradients for the student side
//! only (and, for the MI term, the critics).

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Response;
use crate::nn::{softmax_rows, softmax_rows_backward};
use crate::scalar::Scalar;
use crate::seed::{self, Rng};
use crate::statnet::{ResponseCritics, StatNet};

fn check_pair<T>(a: ArrayView2<T>, b: ArrayView2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: student {:?} vs teacher {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, k: Option<usize>) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(k) = k {
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Shape(format!("label {bad} outside [0, {k})")));
        }
    }
    Ok(())
}

/// Contrastive distillation over all ordered pairs `i != j`:
/// `D(hs_i, ht_i)^2 + max(0, eta - D(hs_i, ht_j))^2`, with the positive term
/// inside the double sum (counted `N - 1` times per sample).
pub fn scd_loss<T: Scalar>(hs: ArrayView2<T>, ht: ArrayView2<T>, eta: T) -> Result<T> {
    Ok(scd_loss_with_grad(hs, ht, eta)?.0)
}

pub fn scd_loss_with_grad<T: Scalar>(hs: ArrayView2<T>, ht: ArrayView2<T>, eta: T) -> Result<(T, Array2<T>)> {
    check_pair(hs, ht, "scd")?;
    let n = hs.nrows();
    if n < 2 {
        return Err(Error::Shape("scd needs at least two samples".into()));
    }
    if !(eta > T::zero()) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let two = T::lit(2.0);
    let pairs = T::from_usize_lossy(n - 1);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(hs.raw_dim());
    for i in 0..n {
        let hi = hs.row(i);
        let pos = &hi - &ht.row(i);
        let pos_sq = pos.dot(&pos);
        loss += pairs * pos_sq;
        grad.row_mut(i).scaled_add(two * pairs, &pos);
        for j in (0..n).filter(|&j| j != i) {
            let diff = &hi - &ht.row(j);
            let d = diff.dot(&diff).sqrt();
            let gap = eta - d;
            if gap > T::zero() {
                loss += gap * gap;
                if d > T::zero() {
                    grad.row_mut(i).scaled_add(-two * gap / d, &diff);
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Mean representation per category present in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable<T> {
    /// Present class ids, ascending.
    pub categories: Vec<usize>,
    /// Row `r` is the prototype of `categories[r]`.
    pub prototypes: Array2<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> PrototypeTable<T> {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn prototype(&self, class: usize) -> Option<ArrayView1<'_, T>> {
        self.categories
            .iter()
            .position(|&c| c == class)
            .map(|r| self.prototypes.row(r))
    }
}

pub fn category_prototypes<T: Scalar>(h: ArrayView2<T>, labels: &[usize]) -> Result<PrototypeTable<T>> {
    check_labels(labels, h.nrows(), None)?;
    if h.nrows() == 0 {
        return Err(Error::Shape("prototypes need at least one sample".into()));
    }
    let mut categories: Vec<usize> = labels.to_vec();
    categories.sort_unstable();
    categories.dedup();
    let mut prototypes = Array2::zeros((categories.len(), h.ncols()));
    let mut counts = vec![0usize; categories.len()];
    for (row, &y) in h.rows().into_iter().zip(labels) {
        let r = categories.binary_search(&y).expect("present");
        prototypes.row_mut(r).zip_mut_with(&row, |p, &v| *p += v);
        counts[r] += 1;
    }
    for (mut p, &c) in prototypes.rows_mut().into_iter().zip(&counts) {
        let c = T::from_usize_lossy(c);
        p.mapv_inplace(|v| v / c);
    }
    Ok(PrototypeTable {
        categories,
        prototypes,
        counts,
    })
}

fn norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.dot(&v).sqrt()
}

/// Cosine similarity of `h_i` to every prototype. Entries whose vector or
/// prototype has zero norm are set to 0 and counted in the second value.
pub fn similarity_row<T: Scalar>(h_i: ArrayView1<T>, table: &PrototypeTable<T>) -> (Array1<T>, usize) {
    let nh = norm(h_i);
    let mut zero_norm = 0;
    let row = table
        .prototypes
        .rows()
        .into_iter()
        .map(|c| {
            let nc = norm(c);
            if nh == T::zero() || nc == T::zero() {
                zero_norm += 1;
                T::zero()
            } else {
                h_i.dot(&c) / (nh * nc)
            }
        })
        .collect();
    (row, zero_norm)
}

pub fn similarity_matrix<T: Scalar>(h: ArrayView2<T>, table: &PrototypeTable<T>) -> (Array2<T>, usize) {
    let mut m = Array2::zeros((h.nrows(), table.len()));
    let mut zero_norm = 0;
    for (i, row) in h.rows().into_iter().enumerate() {
        let (r, z) = similarity_row(row, table);
        m.row_mut(i).assign(&r);
        zero_norm += z;
    }
    (m, zero_norm)
}

#[derive(Debug, Clone)]
pub struct CpdOutput<T> {
    pub value: T,
    pub grad: Array2<T>,
    pub zero_norm: usize,
}

/// Mean absolute difference between student and teacher sample-to-prototype
/// cosine matrices; each side uses its own prototypes.
pub fn cpd_loss<T: Scalar>(hs: ArrayView2<T>, ht: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    Ok(cpd_loss_with_grad(hs, ht, labels)?.value)
}

/// Mean absolute difference of two `N x K` similarity matrices.
pub fn cpd_from_similarities<T: Scalar>(ms: ArrayView2<T>, mt: ArrayView2<T>) -> Result<T> {
    if ms.dim() != mt.dim() || ms.is_empty() {
        return Err(Error::Shape(format!(
            "similarity shapes {:?} vs {:?}",
            ms.dim(),
            mt.dim()
        )));
    }
    let total = ms.iter().zip(mt.iter()).map(|(&a, &b)| (a - b).abs()).sum::<T>();
    Ok(total / T::from_usize_lossy(ms.len()))
}

pub fn cpd_loss_with_grad<T: Scalar>(hs: ArrayView2<T>, ht: ArrayView2<T>, labels: &[usize]) -> Result<CpdOutput<T>> {
    check_pair(hs, ht, "cpd")?;
    let ps = category_prototypes(hs, labels)?;
    let pt = category_prototypes(ht, labels)?;
    let (ms, zs) = similarity_matrix(hs, &ps);
    let (mt, zt) = similarity_matrix(ht, &pt);
    let n = hs.nrows();
    let k = ps.len();
    let scale = T::one() / T::from_usize_lossy(n * k);
    let diff = &ms - &mt;
    let value = cpd_from_similarities(ms.view(), mt.view())?;

    let mut grad = Array2::zeros(hs.raw_dim());
    let mut d_proto = Array2::zeros(ps.prototypes.raw_dim());
    for i in 0..n {
        let h = hs.row(i);
        let nh = norm(h);
        for r in 0..k {
            let g = diff[[i, r]].signum() * scale;
            let c = ps.prototypes.row(r);
            let nc = norm(c);
            if g == T::zero() || diff[[i, r]] == T::zero() || nh == T::zero() || nc == T::zero() {
                continue;
            }
            let m = ms[[i, r]];
            let inv = T::one() / (nh * nc);
            // d cos / dh = c/(|h||c|) - m h/|h|^2, symmetric for c.
            grad.row_mut(i).scaled_add(g * inv, &c);
            grad.row_mut(i).scaled_add(-g * m / (nh * nh), &h);
            d_proto.row_mut(r).scaled_add(g * inv, &h);
            d_proto.row_mut(r).scaled_add(-g * m / (nc * nc), &c);
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        let r = ps.categories.binary_search(&y).expect("present");
        let share = T::one() / T::from_usize_lossy(ps.counts[r]);
        grad.row_mut(i).scaled_add(share, &d_proto.row(r));
    }
    Ok(CpdOutput {
        value,
        grad,
        zero_norm: zs + zt,
    })
}

/// Target-class probability and the remaining probabilities in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledResponse<T> {
    pub tcr: T,
    pub ntcr: Array1<T>,
}

impl<T: Scalar> DecoupledResponse<T> {
    /// Reinserts the target probability at index `y`.
    pub fn reconstruct(&self, y: usize) -> Array1<T> {
        let mut v = Vec::with_capacity(self.ntcr.len() + 1);
        v.extend(self.ntcr.iter().take(y).copied());
        v.push(self.tcr);
        v.extend(self.ntcr.iter().skip(y).copied());
        Array1::from(v)
    }
}

pub fn decouple_response<T: Scalar>(r: &Response<T>, y: usize) -> Result<DecoupledResponse<T>> {
    decouple_probs(r.probs.view(), y)
}

pub fn decouple_probs<T: Scalar>(probs: ArrayView1<T>, y: usize) -> Result<DecoupledResponse<T>> {
    if y >= probs.len() {
        return Err(Error::Shape(format!("target {y} outside [0, {})", probs.len())));
    }
    let ntcr = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &p)| p)
        .collect();
    Ok(DecoupledResponse { tcr: probs[y], ntcr })
}

/// Batch decoupling: `(N, 1)` target column and `(N, K - 1)` remainder,
/// optionally renormalised to sum to one.
pub fn decouple_batch<T: Scalar>(
    probs: ArrayView2<T>,
    labels: &[usize],
    renormalize: bool,
) -> Result<(Array2<T>, Array2<T>)> {
    let (n, k) = probs.dim();
    check_labels(labels, n, Some(k))?;
    let mut tcr = Array2::zeros((n, 1));
    let mut ntcr = Array2::zeros((n, k - 1));
    for (i, &y) in labels.iter().enumerate() {
        let d = decouple_probs(probs.row(i), y)?;
        tcr[[i, 0]] = d.tcr;
        let mut rest = d.ntcr;
        if renormalize {
            let sum = rest.sum();
            rest.mapv_inplace(|v| v / sum);
        }
        ntcr.row_mut(i).assign(&rest);
    }
    Ok((tcr, ntcr))
}

fn decouple_backward<T: Scalar>(
    probs: ArrayView2<T>,
    labels: &[usize],
    renormalize: bool,
    d_tcr: ArrayView2<T>,
    d_ntcr: ArrayView2<T>,
) -> Array2<T> {
    let mut dp = Array2::zeros(probs.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        dp[[i, y]] = d_tcr[[i, 0]];
        let others: Vec<usize> = (0..probs.ncols()).filter(|&c| c != y).collect();
        if renormalize {
            let sum: T = others.iter().map(|&c| probs[[i, c]]).sum();
            let dot: T = others
                .iter()
                .enumerate()
                .map(|(j, &c)| d_ntcr[[i, j]] * probs[[i, c]] / sum)
                .sum();
            for (j, &c) in others.iter().enumerate() {
                dp[[i, c]] = (d_ntcr[[i, j]] - dot) / sum;
            }
        } else {
            for (j, &c) in others.iter().enumerate() {
                dp[[i, c]] = d_ntcr[[i, j]];
            }
        }
    }
    dp
}

/// Uniformly random permutation of `0..n` without fixed points (`n >= 2`).
pub fn random_derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(n >= 2, "no derangement of fewer than two elements");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Shape(format!(
            "permutation of length {} for {n} samples",
            perm.len()
        )));
    }
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || seen[p] {
            return Err(Error::Shape("not a permutation".into()));
        }
        if p == i {
            return Err(Error::Shape(format!("permutation has a fixed point at {i}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Jensen-Shannon mutual-information lower bound:
/// `mean_i[-softplus(-F(q_i, u_i))] - mean_i[softplus(F(q_i, u_perm(i)))]`.
pub fn jsd_mi_estimate<T: Scalar>(
    q: ArrayView2<T>,
    u: ArrayView2<T>,
    statnet: &StatNet<T>,
    perm: &[usize],
) -> Result<T> {
    let (joint, marginal) = jsd_inputs(q, u, perm)?;
    let fj = statnet.forward(joint.view())?;
    let fm = statnet.forward(marginal.view())?;
    Ok(jsd_from_scores(&fj, &fm))
}

fn jsd_inputs<T: Scalar>(q: ArrayView2<T>, u: ArrayView2<T>, perm: &[usize]) -> Result<(Array2<T>, Array2<T>)> {
    let n = q.nrows();
    if u.nrows() != n {
        return Err(Error::Shape(format!("{n} q rows vs {} u rows", u.nrows())));
    }
    if n < 2 {
        return Err(Error::Shape("MI estimate needs at least two samples".into()));
    }
    check_perm(perm, n)?;
    let joint = concatenate(Axis(1), &[q, u]).expect("equal rows");
    let shuffled = u.select(Axis(0), perm);
    let marginal = concatenate(Axis(1), &[q, shuffled.view()]).expect("equal rows");
    Ok((joint, marginal))
}

pub fn jsd_from_scores<T: Scalar>(joint: &[T], marginal: &[T]) -> T {
    let nj = T::from_usize_lossy(joint.len());
    let nm = T::from_usize_lossy(marginal.len());
    let pos = joint.iter().map(|&f| -(-f).softplus()).sum::<T>() / nj;
    let neg = marginal.iter().map(|&f| f.softplus()).sum::<T>() / nm;
    pos - neg
}

/// Value of the estimate plus `scale * dI/du`; critic gradients of
/// `scale * I` are accumulated into `critic_grad`.
pub fn jsd_mi_with_grad<T: Scalar>(
    q: ArrayView2<T>,
    u: ArrayView2<T>,
    statnet: &StatNet<T>,
    perm: &[usize],
    scale: T,
    critic_grad: &mut StatNet<T>,
) -> Result<(T, Array2<T>)> {
    let (joint, marginal) = jsd_inputs(q, u, perm)?;
    let (fj, cj) = statnet.forward_cached(joint.view())?;
    let (fm, cm) = statnet.forward_cached(marginal.view())?;
    let value = jsd_from_scores(&fj, &fm);
    let n = T::from_usize_lossy(q.nrows());
    let dj: Vec<T> = fj.iter().map(|&f| scale * (-f).sigmoid() / n).collect();
    let dm: Vec<T> = fm.iter().map(|&f| -scale * f.sigmoid() / n).collect();
    let dx_joint = statnet.backward(&cj, &dj, critic_grad);
    let dx_marg = statnet.backward(&cm, &dm, critic_grad);
    let qd = q.ncols();
    let mut du = dx_joint.slice(s![.., qd..]).to_owned();
    for (i, &p) in perm.iter().enumerate() {
        let row = dx_marg.slice(s![i, qd..]);
        du.row_mut(p).zip_mut_with(&row, |a, &b| *a += b);
    }
    Ok((value, du))
}

#[derive(Debug, Clone)]
pub struct RcdOutput<T> {
    pub value: T,
    pub mi_target: T,
    pub mi_non_target: T,
    /// `d(weight * L_RCD) / d student logits`.
    pub d_logits: Array2<T>,
}

/// `-I(tcr_t, tcr_s) - I(ntcr_t, ntcr_s)` with a fresh seeded derangement.
pub fn rcd_loss<T: Scalar>(
    probs_t: ArrayView2<T>,
    probs_s: ArrayView2<T>,
    labels: &[usize],
    critics: &ResponseCritics<T>,
    perm_seed: u64,
    renormalize: bool,
) -> Result<T> {
    check_pair(probs_s, probs_t, "rcd")?;
    let perm = random_derangement(probs_s.nrows().max(2), &mut seed::rng(perm_seed, &[0xDE7A]));
    let (tt, nt) = decouple_batch(probs_t, labels, renormalize)?;
    let (ts, ns) = decouple_batch(probs_s, labels, renormalize)?;
    let it = jsd_mi_estimate(tt.view(), ts.view(), &critics.target, &perm)?;
    let int = jsd_mi_estimate(nt.view(), ns.view(), &critics.non_target, &perm)?;
    Ok(-it - int)
}

#[allow(clippy::too_many_arguments)]
pub fn rcd_loss_with_grad<T: Scalar>(
    probs_t: ArrayView2<T>,
    logits_s: ArrayView2<T>,
    labels: &[usize],
    critics: &ResponseCritics<T>,
    perm: &[usize],
    renormalize: bool,
    weight: T,
    critic_grad: &mut ResponseCritics<T>,
) -> Result<RcdOutput<T>> {
    check_pair(logits_s, probs_t, "rcd")?;
    let probs_s = softmax_rows(logits_s);
    let (tt, nt) = decouple_batch(probs_t, labels, renormalize)?;
    let (ts, ns) = decouple_batch(probs_s.view(), labels, renormalize)?;
    // Loss is -I, so the gradient scale of I is -weight.
    let (it, d_ts) = jsd_mi_with_grad(
        tt.view(),
        ts.view(),
        &critics.target,
        perm,
        -weight,
        &mut critic_grad.target,
    )?;
    let (int, d_ns) = jsd_mi_with_grad(
        nt.view(),
        ns.view(),
        &critics.non_target,
        perm,
        -weight,
        &mut critic_grad.non_target,
    )?;
    let d_probs = decouple_backward(probs_s.view(), labels, renormalize, d_ts.view(), d_ns.view());
    let d_logits = softmax_rows_backward(probs_s.view(), d_probs.view());
    Ok(RcdOutput {
        value: -it - int,
        mi_target: it,
        mi_non_target: int,
        d_logits,
    })
}

/// Mean cross-entropy from logits via log-sum-exp.
pub fn task_loss<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    Ok(task_loss_with_grad(logits, labels)?.0)
}

pub fn task_loss_with_grad<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, k) = logits.dim();
    check_labels(labels, n, Some(k))?;
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let nf = T::from_usize_lossy(n);
    let mut loss = T::zero();
    let mut grad = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|g| g / nf);
    Ok((loss / nf, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub scd: f64,
    pub cpd: f64,
    pub rcd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::all(1.0)
    }
}

impl LossWeights {
    pub const fn all(w: f64) -> Self {
        LossWeights {
            task: w,
            scd: w,
            cpd: w,
            rcd: w,
        }
    }

    pub const fn task_only() -> Self {
        LossWeights {
            task: 1.0,
            scd: 0.0,
            cpd: 0.0,
            rcd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.task, self.scd, self.cpd, self.rcd];
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0: {w:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted component values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub scd: f64,
    pub cpd: f64,
    pub rcd: f64,
    pub total: f64,
}

pub fn total_loss<T: Scalar>(components: [T; 4], weights: &LossWeights) -> Result<LossBreakdown> {
    let names = ["task", "scd", "cpd", "rcd"];
    let v = components.map(Scalar::as_f64);
    for (name, x) in names.iter().zip(v) {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                component: (*name).into(),
            });
        }
    }
    let w = [weights.task, weights.scd, weights.cpd, weights.rcd];
    Ok(LossBreakdown {
        task: v[0],
        scd: v[1],
        cpd: v[2],
        rcd: v[3],
        total: v.iter().zip(w).map(|(x, w)| x * w).sum(),
    })
}

/// Everything the student update needs from one batch.
pub struct ObjectiveOutput<T> {
    pub breakdown: LossBreakdown,
    pub d_h: Array2<T>,
    pub d_logits: Array2<T>,
    pub critic_grad: ResponseCritics<T>,
    pub zero_norm: usize,
}

pub struct ObjectiveInputs<'a, T> {
    pub h_s: ArrayView2<'a, T>,
    pub logits_s: ArrayView2<'a, T>,
    pub h_t: ArrayView2<'a, T>,
    pub probs_t: ArrayView2<'a, T>,
    pub labels: &'a [usize],
}

/// Weighted `task + scd + cpd + rcd` with gradients. Pair-based terms are
/// zero on a single-sample batch.
pub fn distillation_objective<T: Scalar>(
    inp: &ObjectiveInputs<'_, T>,
    critics: &ResponseCritics<T>,
    weights: &LossWeights,
    eta: T,
    perm_seed: u64,
    renormalize: bool,
) -> Result<ObjectiveOutput<T>> {
    let n = inp.h_s.nrows();
    let w = |v: f64| T::lit(v);
    let (task, d_task) = task_loss_with_grad(inp.logits_s, inp.labels)?;
    let mut d_logits = d_task * w(weights.task);
    let mut d_h = Array2::zeros(inp.h_s.raw_dim());
    let mut critic_grad = critics.zeros_like();
    let (mut scd, mut rcd) = (T::zero(), T::zero());
    if n >= 2 {
        let (v, g) = scd_loss_with_grad(inp.h_s, inp.h_t, eta)?;
        scd = v;
        d_h.scaled_add(w(weights.scd), &g);
        let perm = random_derangement(n, &mut seed::rng(perm_seed, &[0xDE7A]));
        let out = rcd_loss_with_grad(
            inp.probs_t,
            inp.logits_s,
            inp.labels,
            critics,
            &perm,
            renormalize,
            w(weights.rcd),
            &mut critic_grad,
        )?;
        rcd = out.value;
        d_logits += &out.d_logits;
    }
    let cpd = cpd_loss_with_grad(inp.h_s, inp.h_t, inp.labels)?;
    d_h.scaled_add(w(weights.cpd), &cpd.grad);
    let breakdown = total_loss([task, scd, cpd.value, rcd], weights)?;
    Ok(ObjectiveOutput {
        breakdown,
        d_h,
        d_logits,
        critic_grad,
        zero_norm: cpd.zero_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statnet::StatNetConfig;
    use ndarray::array;

    #[test]
    fn scd_two_sample_case() {
        let h: Array2<f64> = array![[0.0], [1.0]];
        assert!((scd_loss(h.view(), h.view(), 1.2).unwrap() - 0.08).abs() < 1e-12);
    }

    #[test]
    fn scd_errors() {
        let h = array![[0.0, 1.0]];
        assert!(scd_loss(h.view(), h.view(), 1.0).is_err());
        let h2 = array![[0.0], [1.0]];
        assert!(scd_loss(h2.view(), h2.view(), 0.0).is_err());
    }

    #[test]
    fn prototypes_hand_mean() {
        let h = array![[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let t = category_prototypes(h.view(), &[0, 0, 2]).unwrap();
        assert_eq!(t.categories, vec![0, 2]);
        assert_eq!(t.prototype(0).unwrap(), array![0.5, 0.5]);
        assert_eq!(t.prototype(2).unwrap(), array![3.0, 3.0]);
        assert_eq!(t.counts, vec![2, 1]);
        assert!(t.prototype(1).is_none());
    }

    #[test]
    fn cosine_cases_and_zero_guard() {
        let t = PrototypeTable {
            categories: vec![0],
            prototypes: array![[0.5, 0.5]],
            counts: vec![2],
        };
        let (r, z) = similarity_row(array![1.0, 0.0].view(), &t);
        assert!((r[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(z, 0);
        assert!((similarity_row(array![0.5, 0.5].view(), &t).0[0] - 1.0).abs() < 1e-12);
        assert!((similarity_row(array![-0.5, -0.5].view(), &t).0[0] + 1.0).abs() < 1e-12);
        let (r, z) = similarity_row(array![0.0, 0.0].view(), &t);
        assert_eq!((r[0], z), (0.0, 1));
    }

    #[test]
    fn decouple_examples() {
        let p = array![0.7, 0.2, 0.1];
        let d0 = decouple_probs(p.view(), 0).unwrap();
        assert_eq!((d0.tcr, d0.ntcr.clone()), (0.7, array![0.2, 0.1]));
        let d1 = decouple_probs(p.view(), 1).unwrap();
        assert_eq!((d1.tcr, d1.ntcr.clone()), (0.2, array![0.7, 0.1]));
        assert_eq!(d1.reconstruct(1), p);
        assert!(decouple_probs(p.view(), 3).is_err());
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = seed::rng(0, &[]);
        for n in 2..12 {
            let p = random_derangement(n, &mut rng);
            check_perm(&p, n).unwrap();
        }
        assert!(check_perm(&[0, 1], 2).is_err());
        assert!(check_perm(&[1, 1], 2).is_err());
    }

    #[test]
    fn jsd_constant_critic() {
        let q = array![[0.1], [0.5], [0.9]];
        let u = array![[0.3], [0.2], [0.8]];
        let zero = StatNet::constant(StatNetConfig::default(), 0.0).unwrap();
        let v = jsd_mi_estimate(q.view(), u.view(), &zero, &[1, 2, 0]).unwrap();
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_rejects_single_sample() {
        let q = array![[0.1]];
        let zero = StatNet::constant(StatNetConfig::default(), 0.0).unwrap();
        assert!(jsd_mi_estimate(q.view(), q.view(), &zero, &[0]).is_err());
    }

    #[test]
    fn task_loss_uniform() {
        let logits = Array2::<f64>::zeros((3, 4));
        let v = task_loss(logits.view(), &[0, 1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let confident = array![[50.0, 0.0]];
        assert!(task_loss(confident.view(), &[0]).unwrap() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss([1.0, 2.0, 3.0, 4.0], &w).unwrap().total, 10.0);
        assert_eq!(total_loss([0.0; 4], &w).unwrap().total, 0.0);
        let b = total_loss([1.5, 2.0, 3.0, 4.0], &LossWeights::task_only()).unwrap();
        assert_eq!(b.total, 1.5);
        let err = total_loss([1.0, f64::NAN, 0.0, 0.0], &w).unwrap_err();
        assert!(err.to_string().contains("scd"));
    }

    #[test]
    fn renormalized_ntcr_sums_to_one() {
        let p: Array2<f64> = array![[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]];
        let (t, nt) = decouple_batch(p.view(), &[0, 1], true).unwrap();
        assert_eq!(t.column(0).to_vec(), vec![0.5, 0.6]);
        for r in nt.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
