//! Classification metrics and missing-modality robustness sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption::{apply_mrm, sample_pattern, test_condition_grid, MissingMode, MissingnessSpec, ModalitySet};
use crate::datasets::ModalitySample;
use crate::error::{Error, Result};
use crate::model::FusionNet;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// Accuracy, per-class F1 (0 when precision + recall is 0) and the
/// support-weighted F1.
pub fn classification_metrics(preds: &[usize], labels: &[usize], k: usize) -> Metrics {
    assert_eq!(preds.len(), labels.len(), "prediction / label length mismatch");
    let n = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = Vec::with_capacity(k);
    let mut weighted = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        // 2PR / (P + R) == 2 tp / (predicted + support)
        let denom = (predicted + support) as f64;
        let f1 = if tp > 0.0 { 2.0 * tp / denom } else { 0.0 };
        per_class_f1.push(f1);
        if n > 0 {
            weighted += f1 * support as f64 / n as f64;
        }
    }
    Metrics {
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        weighted_f1: weighted,
        per_class_f1,
    }
}

pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    classification_metrics(preds, labels, k).weighted_f1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub condition: String,
    pub p: f64,
    pub available: ModalitySet,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

/// Class predictions of `net` on every sample after one seeded pattern per
/// sample. The pattern seed depends on the run seed, sample id and condition.
pub fn predict_condition<T: Scalar>(
    net: &FusionNet<T>,
    samples: &[ModalitySample<T>],
    spec: &MissingnessSpec,
    run_seed: u64,
) -> Result<Vec<usize>> {
    let cond = seed::str_hash(&spec.condition_label());
    samples
        .iter()
        .map(|s| {
            let pat_seed = seed::mix(run_seed, &[seed::str_hash(&s.id), cond]);
            let pattern = sample_pattern(spec, s.seq_lens(), pat_seed)?;
            let corrupted = apply_mrm(s, &pattern)?;
            Ok(net.forward_sample(&corrupted)?.1.argmax())
        })
        .collect()
}

pub fn evaluate_condition<T: Scalar>(
    net: &FusionNet<T>,
    samples: &[ModalitySample<T>],
    spec: &MissingnessSpec,
    run_seed: u64,
) -> Result<MetricsRow> {
    if spec.mode != MissingMode::Fixed {
        return Err(Error::InvalidConfig(
            "evaluation needs a fixed-mode missingness spec".into(),
        ));
    }
    let preds = predict_condition(net, samples, spec, run_seed)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let m = classification_metrics(&preds, &labels, net.config.num_classes);
    Ok(MetricsRow {
        condition: spec.condition_label(),
        p: spec.p_l,
        available: spec.available,
        accuracy: m.accuracy,
        weighted_f1: m.weighted_f1,
        per_class_f1: m.per_class_f1,
        n: samples.len(),
        seed: run_seed,
    })
}

pub const AVERAGE_LABEL: &str = "Avg.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<MetricsRow>,
    /// Per seed: mean over the six partial-availability inter-modality rows.
    pub averages: Vec<MetricsRow>,
}

fn is_partial_inter(row: &MetricsRow) -> bool {
    row.p == 0.0 && row.available != ModalitySet::ALL && !row.available.is_empty()
}

fn mean_row(rows: &[&MetricsRow], condition: &str, seed: u64) -> MetricsRow {
    let n = rows.len() as f64;
    let k = rows.first().map_or(0, |r| r.per_class_f1.len());
    MetricsRow {
        condition: condition.into(),
        p: 0.0,
        available: ModalitySet::EMPTY,
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        weighted_f1: rows.iter().map(|r| r.weighted_f1).sum::<f64>() / n,
        per_class_f1: (0..k)
            .map(|c| rows.iter().map(|r| r.per_class_f1[c]).sum::<f64>() / n)
            .collect(),
        n: rows.first().map_or(0, |r| r.n),
        seed,
    }
}

impl RobustnessReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let averages = seeds
            .iter()
            .filter_map(|&s| {
                let partial: Vec<&MetricsRow> = rows.iter().filter(|r| r.seed == s && is_partial_inter(r)).collect();
                (!partial.is_empty()).then(|| mean_row(&partial, AVERAGE_LABEL, s))
            })
            .collect();
        RobustnessReport { rows, averages }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.averages.iter().map(|r| r.seed).collect()
    }

    /// Mean of the per-seed six-condition weighted F1 averages.
    pub fn mean_partial_wf1(&self) -> f64 {
        self.averages.iter().map(|r| r.weighted_f1).sum::<f64>() / self.averages.len() as f64
    }

    pub fn row(&self, condition: &str, seed: u64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.condition == condition && r.seed == seed)
    }

    /// `(p, mean weighted F1 over seeds)` for the intra-modality rows.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let mut points: Vec<(f64, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.p > 0.0) {
            match points.iter_mut().find(|(p, _, _)| *p == r.p) {
                Some(pt) => {
                    pt.1 += r.weighted_f1;
                    pt.2 += 1;
                }
                None => points.push((r.p, r.weighted_f1, 1)),
            }
        }
        points.into_iter().map(|(p, s, n)| (p, s / n as f64)).collect()
    }

    /// Per seed: does weighted F1 at p = 0.1 reach at least that at p = 1.0?
    pub fn monotone_flags(&self) -> Vec<(u64, bool)> {
        self.seeds()
            .into_iter()
            .map(|s| {
                let low = self.row("p=0.1", s).map(|r| r.weighted_f1);
                let high = self.row("p=1", s).map(|r| r.weighted_f1);
                (s, matches!((low, high), (Some(a), Some(b)) if a >= b))
            })
            .collect()
    }
}

/// All 17 grid conditions for every seed, rows in grid order then seed.
/// `jobs > 1` spreads conditions over worker threads; results do not depend
/// on it.
pub fn robustness_sweep<T: Scalar>(
    net: &FusionNet<T>,
    samples: &[ModalitySample<T>],
    seeds: &[u64],
    jobs: usize,
) -> Result<RobustnessReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("robustness sweep needs at least one seed".into()));
    }
    let tasks: Vec<(MissingnessSpec, u64)> = test_condition_grid()
        .into_iter()
        .flat_map(|spec| seeds.iter().map(move |&s| (spec.clone(), s)))
        .collect();
    let jobs = jobs.clamp(1, tasks.len());
    let rows: Vec<Result<MetricsRow>> = if jobs == 1 {
        tasks
            .iter()
            .map(|(spec, s)| evaluate_condition(net, samples, spec, *s))
            .collect()
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|(spec, s)| evaluate_condition(net, samples, spec, *s))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    Ok(RobustnessReport::from_rows(rows.into_iter().collect::<Result<_>>()?))
}

pub fn report_header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["condition", "p", "available", "acc", "wf1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..k).map(|c| format!("f1_class{c}")));
    h.push("n".into());
    h.push("seed".into());
    h
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

/// Writes the per-row CSV plus a `p,wf1` curve file.
pub fn write_report(report: &RobustnessReport, path: &Path, curve_path: &Path) -> Result<()> {
    let k = report.rows.first().map_or(0, |r| r.per_class_f1.len());
    let mut w = csv_writer(path)?;
    w.write_record(report_header(k))?;
    for r in report.rows.iter().chain(&report.averages) {
        let mut rec = vec![
            r.condition.clone(),
            r.p.to_string(),
            r.available.letters(),
            r.accuracy.to_string(),
            r.weighted_f1.to_string(),
        ];
        rec.extend(r.per_class_f1.iter().map(f64::to_string));
        rec.push(r.n.to_string());
        rec.push(r.seed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let mut c = csv_writer(curve_path)?;
    c.write_record(["p", "wf1"])?;
    for (p, f) in report.curve() {
        c.write_record([p.to_string(), f.to_string()])?;
    }
    c.flush()
        .map_err(|e| Error::io(format!("writing {}", curve_path.display()), e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RobustnessReport> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let k = headers.len().checked_sub(7).ok_or_else(|| Error::Parse {
        file: path.display().to_string(),
        line: 1,
        msg: "too few columns".into(),
    })?;
    if headers.iter().collect::<Vec<_>>() != report_header(k) {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Parse {
            file: path.display().to_string(),
            line: i + 2,
            msg: msg.into(),
        };
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad("bad number"));
        let row = MetricsRow {
            condition: rec[0].to_string(),
            p: num(1)?,
            available: rec[2].parse().map_err(|_| bad("bad availability set"))?,
            accuracy: num(3)?,
            weighted_f1: num(4)?,
            per_class_f1: (0..k).map(|c| num(5 + c)).collect::<Result<_>>()?,
            n: rec[5 + k].parse().map_err(|_| bad("bad count"))?,
            seed: rec[6 + k].parse().map_err(|_| bad("bad seed"))?,
        };
        if row.condition != AVERAGE_LABEL {
            rows.push(row);
        }
    }
    Ok(RobustnessReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_f1_examples() {
        assert!((weighted_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2) - 0.733_333).abs() < 1e-4);
        assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        assert!((weighted_f1(&[1, 1, 1, 1], &[0, 0, 1, 1], 2) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_has_zero_f1() {
        let m = classification_metrics(&[0, 0], &[0, 0], 3);
        assert_eq!(m.per_class_f1, vec![1.0, 0.0, 0.0]);
        assert_eq!(m.weighted_f1, 1.0);
    }

    fn row(cond: &str, avail: &str, p: f64, wf1: f64, seed: u64) -> MetricsRow {
        MetricsRow {
            condition: cond.into(),
            p,
            available: avail.parse().unwrap(),
            accuracy: wf1,
            weighted_f1: wf1,
            per_class_f1: vec![wf1, wf1],
            n: 10,
            seed,
        }
    }

    #[test]
    fn average_uses_six_partial_conditions() {
        let mut rows = Vec::new();
        for (i, spec) in test_condition_grid().iter().enumerate() {
            rows.push(row(
                &spec.condition_label(),
                &spec.available.letters(),
                spec.p_l,
                i as f64 / 20.0,
                3,
            ));
        }
        let rep = RobustnessReport::from_rows(rows);
        let expect = (0..6).map(|i| i as f64 / 20.0).sum::<f64>() / 6.0;
        assert!((rep.averages[0].weighted_f1 - expect).abs() < 1e-12);
        assert_eq!(rep.curve().len(), 10);
        assert_eq!(rep.monotone_flags(), vec![(3, false)]);
    }
}
