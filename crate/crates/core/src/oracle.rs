//! Independent reference computations used to verify the production code
//! paths: plain-loop `f64` versions of every loss and metric, a central
//! finite-difference gradient, a least-squares classifier, and a binomial
//! confidence interval. Nothing here shares code with the modules it checks.

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Literal double sum over `i`, `j != i`.
pub fn scd_reference(hs: &[Vec<f64>], ht: &[Vec<f64>], eta: f64) -> f64 {
    let n = hs.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let pos = euclid(&hs[i], &ht[i]);
            let neg = (eta - euclid(&hs[i], &ht[j])).max(0.0);
            total += pos * pos + neg * neg;
        }
    }
    total
}

fn prototypes(h: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, Vec<f64>)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|k| {
            let members: Vec<&Vec<f64>> = h.iter().zip(labels).filter(|(_, &y)| y == k).map(|(v, _)| v).collect();
            let mut c = vec![0.0; h[0].len()];
            for m in &members {
                for (a, b) in c.iter_mut().zip(m.iter()) {
                    *a += b;
                }
            }
            for a in &mut c {
                *a /= members.len() as f64;
            }
            (k, c)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn similarity_reference(h: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<f64>> {
    let protos = prototypes(h, labels);
    h.iter()
        .map(|hi| protos.iter().map(|(_, c)| cosine(hi, c)).collect())
        .collect()
}

pub fn cpd_reference(hs: &[Vec<f64>], ht: &[Vec<f64>], labels: &[usize]) -> f64 {
    let ms = similarity_reference(hs, labels);
    let mt = similarity_reference(ht, labels);
    let n = ms.len();
    let k = ms[0].len();
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..k {
            total += (ms[i][c] - mt[i][c]).abs();
        }
    }
    total / (n * k) as f64
}

/// JSD estimate from raw critic scores using the unstabilised formula.
pub fn jsd_reference(joint_scores: &[f64], marginal_scores: &[f64]) -> f64 {
    let pos: f64 = joint_scores.iter().map(|f| -(1.0 + (-f).exp()).ln()).sum::<f64>() / joint_scores.len() as f64;
    let neg: f64 = marginal_scores.iter().map(|f| (1.0 + f.exp()).ln()).sum::<f64>() / marginal_scores.len() as f64;
    pos - neg
}

/// `-mean(log p[y])` from probabilities.
pub fn cross_entropy_reference(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    -probs.iter().zip(labels).map(|(p, &y)| p[y].ln()).sum::<f64>() / labels.len() as f64
}

pub fn softmax_reference(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-class F1 by direct counting, and their support-weighted mean.
pub fn weighted_f1_reference(preds: &[usize], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let mut per_class = Vec::with_capacity(k);
    let mut weighted = 0.0;
    for c in 0..k {
        let tp = preds.iter().zip(labels).filter(|(&p, &y)| p == c && y == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&y| y == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(f1);
        weighted += f1 * actual / labels.len() as f64;
    }
    (weighted, per_class)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= factor * a[col][c];
            }
            for c in 0..b[row].len() {
                b[row][c] -= factor * b[col][c];
            }
        }
    }
    (0..n).map(|i| b[i].iter().map(|v| v / a[i][i]).collect()).collect()
}

/// Training accuracy of a one-vs-rest least-squares linear classifier with a
/// bias column and a tiny ridge term.
pub fn least_squares_accuracy(features: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = features[0].len() + 1;
    let rows: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().copied().chain(std::iter::once(1.0)).collect())
        .collect();
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![vec![0.0; k]; dim];
    for (r, &y) in rows.iter().zip(labels) {
        for i in 0..dim {
            for j in 0..dim {
                xtx[i][j] += r[i] * r[j];
            }
            xty[i][y] += r[i];
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    let w = solve(xtx, xty);
    let correct = rows
        .iter()
        .zip(labels)
        .filter(|(r, &y)| {
            let scores: Vec<f64> = (0..k).map(|c| (0..dim).map(|i| r[i] * w[i][c]).sum()).collect();
            let best = (0..k).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).expect("k >= 1");
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Normal-approximation 95% interval for the success count fraction of
/// `n` Bernoulli(`p`) trials.
pub fn binomial_ci95(n: usize, p: f64) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn least_squares_separates_two_points() {
        let f = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.1, 0.9]];
        assert_eq!(least_squares_accuracy(&f, &[0, 1, 0], 2), 1.0);
    }

    #[test]
    fn weighted_f1_hand_case() {
        let (w, per) = weighted_f1_reference(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[1] - 0.8).abs() < 1e-12);
        assert!((w - 0.733_333_333_333).abs() < 1e-9);
    }
}
