//! Tabular and JSON outputs for simulation runs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{CaseResult, MarketHistory};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_json<W: Write, T: Serialize>(value: &T, writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, value).map_err(|e| Error::Io(e.to_string()))
}

/// Long format: `hour,case,rpp,payoff`. Hours are 0-based positions in the
/// test window; producers are 1-based to match the history columns.
pub fn write_flat_csv<W: Write>(results: &[CaseResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["hour", "case", "rpp", "payoff"])
        .map_err(csv_err)?;
    for r in results {
        for (t, row) in r.hourly.iter().enumerate() {
            for (i, p) in row.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    r.case.clone(),
                    (i + 1).to_string(),
                    p.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean hourly payoff of each producer per calendar day:
/// `date,case,rpp,mean_payoff`.
pub fn write_daily_csv<W: Write>(
    history: &MarketHistory,
    results: &[CaseResult],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "case", "rpp", "mean_payoff"])
        .map_err(csv_err)?;
    for r in results {
        check_len(history, r)?;
        let mut days: BTreeMap<chrono::NaiveDate, (Vec<f64>, usize)> = BTreeMap::new();
        for (h, row) in history.hours().iter().zip(&r.hourly) {
            let e = days
                .entry(h.instant.date())
                .or_insert_with(|| (vec![0.0; row.len()], 0));
            for (acc, p) in e.0.iter_mut().zip(row) {
                *acc += p;
            }
            e.1 += 1;
        }
        for (date, (sums, count)) in days {
            for (i, s) in sums.iter().enumerate() {
                w.write_record([
                    date.to_string(),
                    r.case.clone(),
                    (i + 1).to_string(),
                    (s / count as f64).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean total payoff by hour of day: `hour_of_day,case,mean_total_payoff`.
pub fn write_hour_of_day_csv<W: Write>(
    history: &MarketHistory,
    results: &[CaseResult],
    writer: W,
) -> Result<()> {
    use chrono::Timelike;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["hour_of_day", "case", "mean_total_payoff"])
        .map_err(csv_err)?;
    for r in results {
        check_len(history, r)?;
        let mut sums = [0.0; 24];
        let mut counts = [0usize; 24];
        for (h, total) in history.hours().iter().zip(&r.per_hour_totals) {
            let k = h.instant.hour() as usize;
            sums[k] += total;
            counts[k] += 1;
        }
        for k in (0..24).filter(|&k| counts[k] > 0) {
            w.write_record([
                k.to_string(),
                r.case.clone(),
                (sums[k] / counts[k] as f64).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn check_len(history: &MarketHistory, r: &CaseResult) -> Result<()> {
    if r.hourly.len() != history.len() {
        return Err(Error::Dimension {
            expected: history.len(),
            found: r.hourly.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub grand_total: f64,
    pub per_rpp_totals: Vec<f64>,
    pub warning_hours: usize,
}

/// Totals per case plus the gain of each case over the next one in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cases: Vec<CaseSummary>,
    /// `(a, b, total_a - total_b)` for consecutive cases.
    pub gaps: Vec<(String, String, f64)>,
}

pub fn compare(results: &[CaseResult]) -> Comparison {
    let cases: Vec<CaseSummary> = results
        .iter()
        .map(|r| CaseSummary {
            case: r.case.clone(),
            grand_total: r.grand_total,
            per_rpp_totals: r.per_rpp_totals.clone(),
            warning_hours: r.warnings.len(),
        })
        .collect();
    let gaps = cases
        .windows(2)
        .map(|w| {
            (
                w[0].case.clone(),
                w[1].case.clone(),
                w[0].grand_total - w[1].grand_total,
            )
        })
        .collect();
    Comparison { cases, gaps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simharness::history::{parse_timestamp, HourRecord};

    fn fixture() -> (MarketHistory, CaseResult) {
        let ts = [
            "2004-02-01T00:00:00",
            "2004-02-01T01:00:00",
            "2004-02-02T00:00:00",
        ];
        let hours = ts
            .iter()
            .map(|t| HourRecord {
                timestamp: t.to_string(),
                instant: parse_timestamp(t).unwrap(),
                forecasts: vec![1.0, 1.0],
                actuals: vec![1.0, 1.0],
                p_da: 30.0,
                p_rt: 30.0,
            })
            .collect();
        let history = MarketHistory::new(hours).unwrap();
        let result = CaseResult {
            case: "case2".into(),
            timestamps: ts.iter().map(|s| s.to_string()).collect(),
            hourly: vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            per_rpp_totals: vec![9.0, 12.0],
            per_hour_totals: vec![3.0, 7.0, 11.0],
            grand_total: 21.0,
            warnings: vec![],
            clipped_commitments: 0,
        };
        (history, result)
    }

    #[test]
    fn flat_csv_rows() {
        let (_, r) = fixture();
        let mut buf = Vec::new();
        write_flat_csv(&[r], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "hour,case,rpp,payoff");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[4], "1,case2,2,4");
    }

    #[test]
    fn daily_and_hourly_averages() {
        let (h, r) = fixture();
        let mut buf = Vec::new();
        write_daily_csv(&h, &[r.clone()], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("2004-02-01,case2,1,2\n"));
        assert!(s.contains("2004-02-02,case2,2,6\n"));

        let mut buf = Vec::new();
        write_hour_of_day_csv(&h, &[r], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("0,case2,7\n"));
        assert!(s.contains("1,case2,7\n"));
    }

    #[test]
    fn comparison_gaps() {
        let (_, a) = fixture();
        let mut b = a.clone();
        b.case = "case3".into();
        b.grand_total = 15.0;
        let c = compare(&[a, b]);
        assert_eq!(c.gaps, vec![("case2".into(), "case3".into(), 6.0)]);
    }
}
