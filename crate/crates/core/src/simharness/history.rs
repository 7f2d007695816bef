//! Hourly market history: forecasts, realized generation and market prices.
//!
//! CSV layout (UTF-8, header row):
//! `timestamp,forecast_1..forecast_N,actual_1..actual_N,p_da,p_rt`.

use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    /// Timestamp as written in the source.
    pub timestamp: String,
    /// Parsed timestamp, normalized to UTC when an offset was given.
    #[serde(skip)]
    pub instant: NaiveDateTime,
    pub forecasts: Vec<f64>,
    pub actuals: Vec<f64>,
    pub p_da: f64,
    pub p_rt: f64,
}

/// Time-ordered hourly records for a fixed roster of producers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketHistory {
    n_rpps: usize,
    hours: Vec<HourRecord>,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

impl MarketHistory {
    /// Validates a constant roster, strictly increasing timestamps, and
    /// finite nonnegative energies.
    pub fn new(hours: Vec<HourRecord>) -> Result<Self> {
        let n_rpps = hours.first().map_or(0, |h| h.forecasts.len());
        if hours.is_empty() {
            return Err(Error::data("history has no rows"));
        }
        if n_rpps == 0 {
            return Err(Error::data("history has no producers"));
        }
        for (k, h) in hours.iter().enumerate() {
            let row = k + 1;
            if h.forecasts.len() != n_rpps || h.actuals.len() != n_rpps {
                return Err(Error::data_at(
                    row,
                    format!("expected {n_rpps} forecasts and actuals"),
                ));
            }
            if let Some(v) = h
                .forecasts
                .iter()
                .chain(&h.actuals)
                .find(|v| !v.is_finite() || **v < 0.0)
            {
                return Err(Error::data_at(
                    row,
                    format!("energy {v} must be finite and nonnegative"),
                ));
            }
            if !(h.p_da.is_finite() && h.p_rt.is_finite()) {
                return Err(Error::data_at(row, "prices must be finite"));
            }
            if k > 0 && h.instant <= hours[k - 1].instant {
                return Err(Error::data_at(
                    row,
                    format!(
                        "timestamp {} does not follow {}",
                        h.timestamp,
                        hours[k - 1].timestamp
                    ),
                ));
            }
        }
        Ok(Self { n_rpps, hours })
    }

    pub fn n_rpps(&self) -> usize {
        self.n_rpps
    }

    pub fn hours(&self) -> &[HourRecord] {
        &self.hours
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    /// Splits into the first `rows` hours and the remainder.
    pub fn split_at(&self, rows: usize) -> Result<(MarketHistory, MarketHistory)> {
        if rows == 0 || rows >= self.hours.len() {
            return Err(Error::data(format!(
                "cannot split {} rows at {rows}",
                self.hours.len()
            )));
        }
        let (a, b) = self.hours.split_at(rows);
        Ok((Self::new(a.to_vec())?, Self::new(b.to_vec())?))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::data(format!("cannot read header: {e}")))?
            .clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::data("empty CSV"));
        }
        let n = validate_header(&header)?;
        let mut hours = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec.map_err(|e| Error::data_at(row, e.to_string()))?;
            if rec.len() != 2 * n + 3 {
                return Err(Error::data_at(
                    row,
                    format!("expected {} fields, found {}", 2 * n + 3, rec.len()),
                ));
            }
            let num = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|_| {
                    Error::data_at(
                        row,
                        format!("column {} is not a number: {:?}", &header[j], &rec[j]),
                    )
                })
            };
            let timestamp = rec[0].to_string();
            let instant = parse_timestamp(&timestamp).ok_or_else(|| {
                Error::data_at(row, format!("invalid ISO-8601 timestamp {timestamp:?}"))
            })?;
            hours.push(HourRecord {
                timestamp,
                instant,
                forecasts: (1..=n).map(num).collect::<Result<_>>()?,
                actuals: (n + 1..=2 * n).map(num).collect::<Result<_>>()?,
                p_da: num(2 * n + 1)?,
                p_rt: num(2 * n + 2)?,
            });
        }
        Self::new(hours)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.n_rpps;
        let mut header = vec!["timestamp".to_string()];
        header.extend((1..=n).map(|i| format!("forecast_{i}")));
        header.extend((1..=n).map(|i| format!("actual_{i}")));
        header.extend(["p_da".to_string(), "p_rt".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for h in &self.hours {
            let mut rec = vec![h.timestamp.clone()];
            rec.extend(h.forecasts.iter().chain(&h.actuals).map(|v| v.to_string()));
            rec.push(h.p_da.to_string());
            rec.push(h.p_rt.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn validate_header(header: &csv::StringRecord) -> Result<usize> {
    let cols = header.len();
    if cols < 5 || (cols - 3) % 2 != 0 {
        return Err(Error::data(format!(
            "header has {cols} columns; expected timestamp, N forecasts, N actuals, p_da, p_rt"
        )));
    }
    let n = (cols - 3) / 2;
    let mut expected = vec!["timestamp".to_string()];
    expected.extend((1..=n).map(|i| format!("forecast_{i}")));
    expected.extend((1..=n).map(|i| format!("actual_{i}")));
    expected.extend(["p_da".to_string(), "p_rt".to_string()]);
    for (got, want) in header.iter().zip(&expected) {
        if got != want {
            return Err(Error::data(format!(
                "header column {got:?} should be {want:?}"
            )));
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "timestamp,forecast_1,forecast_2,actual_1,actual_2,p_da,p_rt\n\
        2004-02-01T00:00:00,10,20,11,19,30,50\n\
        2004-02-01T01:00:00,12,18,12.5,17,31,10\n";

    #[test]
    fn parses_sample() {
        let h = MarketHistory::read_csv(SAMPLE.as_bytes()).unwrap();
        assert_eq!(h.n_rpps(), 2);
        assert_eq!(h.len(), 2);
        assert_eq!(h.hours()[1].actuals, vec![12.5, 17.0]);
        assert_eq!(h.hours()[0].p_rt, 50.0);
    }

    #[test]
    fn csv_round_trip() {
        let h = MarketHistory::read_csv(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(MarketHistory::read_csv(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn timestamps_with_offsets() {
        assert!(parse_timestamp("2004-02-01T00:00:00Z").is_some());
        assert!(parse_timestamp("2004-02-01T00:00:00-05:00").is_some());
        assert!(parse_timestamp("2004-02-01 07:00").is_some());
        assert!(parse_timestamp("Feb 1").is_none());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(MarketHistory::read_csv("".as_bytes()).is_err());
        let header_only = "timestamp,forecast_1,actual_1,p_da,p_rt\n";
        assert!(MarketHistory::read_csv(header_only.as_bytes()).is_err());
        let bad_header = "timestamp,f1,actual_1,p_da,p_rt\n2004-02-01T00:00:00,1,1,1,1\n";
        assert!(MarketHistory::read_csv(bad_header.as_bytes()).is_err());

        let bad_row = "timestamp,forecast_1,actual_1,p_da,p_rt\n\
            2004-02-01T00:00:00,1,1,30,20\n\
            2004-02-01T01:00:00,1,abc,30,20\n";
        let err = MarketHistory::read_csv(bad_row.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Data { row: Some(2), .. }), "{err}");

        let unordered = "timestamp,forecast_1,actual_1,p_da,p_rt\n\
            2004-02-01T01:00:00,1,1,30,20\n\
            2004-02-01T00:00:00,1,1,30,20\n";
        assert!(matches!(
            MarketHistory::read_csv(unordered.as_bytes()),
            Err(Error::Data { row: Some(2), .. })
        ));

        let negative = "timestamp,forecast_1,actual_1,p_da,p_rt\n2004-02-01T00:00:00,1,-1,30,20\n";
        assert!(MarketHistory::read_csv(negative.as_bytes()).is_err());
    }

    #[test]
    fn split() {
        let h = MarketHistory::read_csv(SAMPLE.as_bytes()).unwrap();
        let (a, b) = h.split_at(1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(h.split_at(0).is_err());
        assert!(h.split_at(2).is_err());
    }
}
