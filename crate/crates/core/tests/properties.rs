use corrkd::corruption::{apply_mrm, drop_count, sample_pattern, MissingnessSpec, ModalitySet};
use corrkd::datasets::{Modality, ModalitySample};
use corrkd::eval::classification_metrics;
use corrkd::losses::*;
use corrkd::oracle;
use corrkd::seed;
use corrkd::statnet::{ResponseCritics, StatNet, StatNetConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
}

fn batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Vec<usize>)> {
    (2usize..7, 1usize..5, 2usize..4)
        .prop_flat_map(|(n, d, k)| (matrix(n, d), matrix(n, d), prop::collection::vec(0..k, n)))
}

fn probs(n: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    matrix(n, k).prop_map(|m| corrkd::nn::softmax_rows(m.view()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dropped_frames_match_rounding(p in 0.0f64..=1.0, t in 1usize..30, s in any::<u64>()) {
        let spec = MissingnessSpec::fixed(ModalitySet::ALL, p);
        let pat = sample_pattern(&spec, [t, t, t], s).unwrap();
        for m in Modality::ALL {
            prop_assert_eq!(pat.dropped_frames(m), (p * t as f64).round() as usize);
            prop_assert_eq!(pat.dropped_frames(m), drop_count(p, t));
        }
    }

    #[test]
    fn corruption_zeroes_exactly_the_masked_rows(p in 0.0f64..=1.0, la in any::<bool>(), s in any::<u64>()) {
        let set = if la { "la" } else { "v" };
        let spec = MissingnessSpec::fixed(set.parse().unwrap(), p);
        let x = ModalitySample {
            id: "x".into(),
            label: 0,
            x: [Array2::from_elem((7, 3), 1.5), Array2::from_elem((7, 2), -0.5), Array2::from_elem((7, 2), 2.0)],
        };
        let pat = sample_pattern(&spec, x.seq_lens(), s).unwrap();
        let y = apply_mrm(&x, &pat).unwrap();
        for m in Modality::ALL {
            let i = m.index();
            for t in 0..7 {
                let keep = pat.modality_flag[i] && pat.frame_mask[i][t];
                for (&a, &b) in y.x[i].row(t).iter().zip(x.x[i].row(t)) {
                    prop_assert_eq!(a, if keep { b } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn weighted_f1_matches_reference(
        (k, preds, labels) in (1usize..=5, 1usize..=50).prop_flat_map(|(k, n)| {
            (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
        })
    ) {
        let m = classification_metrics(&preds, &labels, k);
        let (w, per) = oracle::weighted_f1_reference(&preds, &labels, k);
        prop_assert!((m.weighted_f1 - w).abs() <= 1e-9);
        for (a, b) in m.per_class_f1.iter().zip(&per) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for v in m.per_class_f1.iter().chain([&m.accuracy, &m.weighted_f1]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn metrics_equivariant_under_relabeling(
        (perm, preds, labels) in (2usize..=5, 1usize..=40).prop_flat_map(|(k, n)| {
            (Just((0..k).collect::<Vec<_>>()).prop_shuffle(), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
        })
    ) {
        let k = perm.len();
        let a = classification_metrics(&preds, &labels, k);
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let b = classification_metrics(&pp, &pl, k);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.weighted_f1 - b.weighted_f1).abs() <= 1e-12);
        for (c, &pc) in perm.iter().enumerate() {
            prop_assert!((a.per_class_f1[c] - b.per_class_f1[pc]).abs() <= 1e-12);
        }
    }

    #[test]
    fn scd_and_cpd_agree_with_references((hs, ht, y) in batch()) {
        let scd = scd_loss(hs.view(), ht.view(), 1.2).unwrap();
        let r = oracle::scd_reference(&rows(&hs), &rows(&ht), 1.2);
        prop_assert!((scd - r).abs() <= 1e-9 * r.abs().max(1.0));
        prop_assert!(scd >= 0.0);
        let cpd = cpd_loss(hs.view(), ht.view(), &y).unwrap();
        prop_assert!((cpd - oracle::cpd_reference(&rows(&hs), &rows(&ht), &y)).abs() <= 1e-12);
        prop_assert!(cpd >= 0.0);
    }

    #[test]
    fn pair_losses_invariant_under_joint_permutation((hs, ht, y) in batch(), s in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = hs.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(s, &[]));
        let ps = hs.select(ndarray::Axis(0), &order);
        let pt = ht.select(ndarray::Axis(0), &order);
        let py: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        let a = scd_loss(hs.view(), ht.view(), 1.0).unwrap();
        let b = scd_loss(ps.view(), pt.view(), 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        let c = cpd_loss(hs.view(), ht.view(), &y).unwrap();
        let d = cpd_loss(ps.view(), pt.view(), &py).unwrap();
        prop_assert!((c - d).abs() <= 1e-12);
        let ta = category_prototypes(hs.view(), &y).unwrap();
        let tb = category_prototypes(ps.view(), &py).unwrap();
        prop_assert_eq!(&ta.categories, &tb.categories);
        prop_assert!((&ta.prototypes - &tb.prototypes).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn cpd_invariant_under_positive_scaling((hs, ht, y) in batch(), a in 0.1f64..10.0, b in 0.1f64..10.0) {
        let base = cpd_loss(hs.view(), ht.view(), &y).unwrap();
        let scaled = cpd_loss((&hs * a).view(), (&ht * b).view(), &y).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9);
    }

    #[test]
    fn prototypes_are_exact_means((hs, _ht, y) in batch()) {
        let t = category_prototypes(hs.view(), &y).unwrap();
        for (r, &c) in t.categories.iter().enumerate() {
            let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
            prop_assert_eq!(t.counts[r], members.len());
            for d in 0..hs.ncols() {
                let mean = members.iter().map(|&i| hs[[i, d]]).sum::<f64>() / members.len() as f64;
                prop_assert!((t.prototypes[[r, d]] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn similarities_are_cosines((hs, _ht, y) in batch()) {
        let t = category_prototypes(hs.view(), &y).unwrap();
        let (m, _) = similarity_matrix(hs.view(), &t);
        let r = oracle::similarity_reference(&rows(&hs), &y);
        for (i, row) in r.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                prop_assert!((m[[i, k]] - v).abs() <= 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m[[i, k]]));
            }
        }
    }

    #[test]
    fn decoupling_is_a_bijection(p in probs(1, 4), y in 0usize..4) {
        let row = p.row(0);
        let d = decouple_probs(row, y).unwrap();
        prop_assert!((d.tcr + d.ntcr.sum() - 1.0).abs() <= 1e-6);
        prop_assert!(d.tcr > 0.0 && d.tcr < 1.0);
        prop_assert_eq!(d.reconstruct(y), row.to_owned());
    }

    #[test]
    fn jsd_bounded_and_rcd_nonnegative(pt in probs(5, 3), ps in probs(5, 3), y in prop::collection::vec(0usize..3, 5), s in 0u64..1000) {
        let critics = ResponseCritics::<f64>::new(3, 8, 2, s).unwrap();
        let perm = random_derangement(5, &mut seed::rng(s, &[1]));
        let q = pt.column(0).to_owned().insert_axis(ndarray::Axis(1));
        let u = ps.column(0).to_owned().insert_axis(ndarray::Axis(1));
        prop_assert!(jsd_mi_estimate(q.view(), u.view(), &critics.target, &perm).unwrap() <= 0.0);
        prop_assert!(rcd_loss(pt.view(), ps.view(), &y, &critics, s, false).unwrap() >= 0.0);
    }

    #[test]
    fn jsd_constant_critic_closed_form(c in -5.0f64..5.0) {
        let net = StatNet::constant(StatNetConfig::default(), c).unwrap();
        let q = Array2::from_shape_fn((4, 1), |(i, _)| i as f64 * 0.1);
        let perm = [1, 2, 3, 0];
        let est = jsd_mi_estimate(q.view(), q.view(), &net, &perm).unwrap();
        let expect = -(1.0 + (-c).exp()).ln() - (1.0 + c.exp()).ln();
        prop_assert!((est - expect).abs() <= 1e-12);
        prop_assert!(est <= -2.0 * std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn derangements_have_no_fixed_points(n in 2usize..40, s in any::<u64>()) {
        let p = random_derangement(n, &mut seed::rng(s, &[]));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn task_loss_matches_naive_reference(logits in matrix(4, 3), y in prop::collection::vec(0usize..3, 4)) {
        let probs: Vec<Vec<f64>> = logits.outer_iter().map(|r| oracle::softmax_reference(&r.to_vec())).collect();
        let want = oracle::cross_entropy_reference(&probs, &y);
        prop_assert!((task_loss(logits.view(), &y).unwrap() - want).abs() <= 1e-6);
    }

    #[test]
    fn total_is_weighted_sum(c in prop::array::uniform4(0.0f64..10.0), w in prop::array::uniform4(0.0f64..2.0)) {
        let weights = LossWeights { task: w[0], scd: w[1], cpd: w[2], rcd: w[3] };
        let b = total_loss(c, &weights).unwrap();
        let want: f64 = c.iter().zip(w).map(|(x, w)| x * w).sum();
        prop_assert!((b.total - want).abs() <= 1e-9);
        let unit = total_loss(c, &LossWeights::default()).unwrap();
        prop_assert!((unit.total - (unit.task + unit.scd + unit.cpd + unit.rcd)).abs() <= 1e-6);
    }
}
