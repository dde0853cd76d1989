use std::fs;
use std::path::{Path, PathBuf};

use super::sim::{ExperimentResult, RoundMetrics};
use crate::{Error, Result};

pub const ROUND_COLUMNS: [&str; 15] = [
    "seed",
    "round",
    "dmse",
    "qmse",
    "metric",
    "decode_error",
    "block_error_rate",
    "a_sum",
    "mismatch",
    "infeasible",
    "eta",
    "test_loss",
    "test_accuracy",
    "gap_bound",
    "config_hash",
];

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "round",
    "seeds",
    "test_accuracy_mean",
    "test_accuracy_se",
    "test_loss_mean",
    "test_loss_se",
    "dmse_mean",
    "qmse_mean",
    "metric_mean",
    "decode_error_rate",
    "block_error_rate_mean",
    "a_sum_mean",
    "gap_bound_mean",
    "config_hash",
];

/// Per-round aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub round: usize,
    pub seeds: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_se: f64,
    pub test_loss_mean: f64,
    pub test_loss_se: f64,
    pub dmse_mean: f64,
    pub qmse_mean: f64,
    pub metric_mean: f64,
    pub decode_error_rate: f64,
    pub block_error_rate_mean: f64,
    pub a_sum_mean: f64,
    pub gap_bound_mean: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean (and standard error where listed) over all seeds per round.
pub fn summarize(rounds: &[RoundMetrics]) -> Vec<SummaryRow> {
    let last = rounds.iter().map(|r| r.round).max();
    let Some(last) = last else {
        return Vec::new();
    };
    (0..=last)
        .filter_map(|t| {
            let rows: Vec<&RoundMetrics> = rounds.iter().filter(|r| r.round == t).collect();
            if rows.is_empty() {
                return None;
            }
            let col = |f: fn(&RoundMetrics) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (acc, acc_se) = mean_se(&col(|r| r.test_accuracy));
            let (loss, loss_se) = mean_se(&col(|r| r.test_loss));
            Some(SummaryRow {
                round: t,
                seeds: rows.len(),
                test_accuracy_mean: acc,
                test_accuracy_se: acc_se,
                test_loss_mean: loss,
                test_loss_se: loss_se,
                dmse_mean: mean_se(&col(|r| r.dmse)).0,
                qmse_mean: mean_se(&col(|r| r.qmse)).0,
                metric_mean: mean_se(&col(|r| r.metric)).0,
                decode_error_rate: mean_se(&col(|r| f64::from(u8::from(r.decode_error)))).0,
                block_error_rate_mean: mean_se(&col(|r| r.block_error_rate)).0,
                a_sum_mean: mean_se(&col(|r| r.a_sum as f64)).0,
                gap_bound_mean: mean_se(&col(|r| r.gap_bound)).0,
            })
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_table(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `rounds.csv` and `summary.csv` into `dir`; returns both paths.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = &result.config_hash;
    let rounds_path = dir.join("rounds.csv");
    write_table(
        &rounds_path,
        &ROUND_COLUMNS,
        result.rounds.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.round.to_string(),
                r.dmse.to_string(),
                r.qmse.to_string(),
                r.metric.to_string(),
                u8::from(r.decode_error).to_string(),
                r.block_error_rate.to_string(),
                r.a_sum.to_string(),
                r.mismatch.to_string(),
                u8::from(r.infeasible).to_string(),
                r.eta.to_string(),
                r.test_loss.to_string(),
                r.test_accuracy.to_string(),
                r.gap_bound.to_string(),
                hash.clone(),
            ]
        }),
    )?;
    let summary_path = dir.join("summary.csv");
    write_table(
        &summary_path,
        &SUMMARY_COLUMNS,
        summarize(&result.rounds).into_iter().map(|s| {
            vec![
                s.round.to_string(),
                s.seeds.to_string(),
                s.test_accuracy_mean.to_string(),
                s.test_accuracy_se.to_string(),
                s.test_loss_mean.to_string(),
                s.test_loss_se.to_string(),
                s.dmse_mean.to_string(),
                s.qmse_mean.to_string(),
                s.metric_mean.to_string(),
                s.decode_error_rate.to_string(),
                s.block_error_rate_mean.to_string(),
                s.a_sum_mean.to_string(),
                s.gap_bound_mean.to_string(),
                hash.clone(),
            ]
        }),
    )?;
    Ok((rounds_path, summary_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, round: usize, acc: f64) -> RoundMetrics {
        RoundMetrics {
            seed,
            round,
            dmse: 0.0,
            qmse: 0.0,
            metric: 0.0,
            decode_error: seed == 1,
            block_error_rate: 0.0,
            a_sum: 3,
            mismatch: 1.0 / 3.0,
            infeasible: false,
            eta: 1.0,
            test_loss: 1.0,
            test_accuracy: acc,
            gap_bound: 0.0,
        }
    }

    #[test]
    fn summary_averages_seeds() {
        let s = summarize(&[row(0, 0, 0.5), row(1, 0, 0.7), row(0, 1, 0.6), row(1, 1, 0.8)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].test_accuracy_mean - 0.6).abs() < 1e-15);
        assert!((s[1].test_accuracy_mean - 0.7).abs() < 1e-15);
        assert!((s[0].test_accuracy_se - 0.1).abs() < 1e-12);
        assert_eq!(s[0].decode_error_rate, 0.5);
    }

    #[test]
    fn empty_result_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let res = ExperimentResult {
            config_hash: "abc".into(),
            rounds: Vec::new(),
        };
        let (r, s) = write_outputs(&res, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(r).unwrap().trim_end(), ROUND_COLUMNS.join(","));
        assert_eq!(fs::read_to_string(s).unwrap().trim_end(), SUMMARY_COLUMNS.join(","));
    }
}
