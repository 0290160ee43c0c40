//! CSV ingestion, run manifests, and flat key=value config files.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Daily closing prices with strictly increasing dates.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub close: Vec<f64>,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Restrict to `from ..= to` (either bound optional).
    pub fn filter_dates(&self, from: Option<NaiveDate>, to: Option<NaiveDate>) -> PriceSeries {
        let keep = |d: &NaiveDate| from.is_none_or(|f| *d >= f) && to.is_none_or(|t| *d <= t);
        let mut dates = Vec::new();
        let mut close = Vec::new();
        for (d, c) in self.dates.iter().zip(&self.close) {
            if keep(d) {
                dates.push(*d);
                close.push(*c);
            }
        }
        PriceSeries { dates, close }
    }

    pub fn log_returns(&self) -> Result<Vec<f64>> {
        crate::model::log_returns(&self.close)
    }
}

fn ingestion(row: usize, message: impl Into<String>) -> Error {
    Error::Ingestion { row, message: message.into() }
}

/// Read a `date,close` CSV. Rows are 1-based in error messages (row 1 is the
/// header).
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "date" || cols[1] != "close" {
            return Err(ingestion(1, format!("expected header `date,close`, got `{}`", cols.join(","))));
        }
    }
    let mut dates = Vec::new();
    let mut close = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let date_field = record.get(0).ok_or_else(|| ingestion(row, "missing date field"))?;
        let close_field = record.get(1).ok_or_else(|| ingestion(row, "missing close field"))?;
        let date = NaiveDate::parse_from_str(date_field.trim(), "%Y-%m-%d")
            .map_err(|e| ingestion(row, format!("bad date `{date_field}`: {e}")))?;
        let price: f64 = close_field
            .trim()
            .parse()
            .map_err(|e| ingestion(row, format!("bad close `{close_field}`: {e}")))?;
        if !(price > 0.0) {
            return Err(ingestion(row, format!("close = {price} must be > 0")));
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(ingestion(row, format!("date {date} not after {prev}")));
            }
        }
        dates.push(date);
        close.push(price);
    }
    if dates.is_empty() {
        return Err(ingestion(2, "no data rows"));
    }
    Ok(PriceSeries { dates, close })
}

/// A simulated (or observed) return series, optionally with the true
/// volatility path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSeries {
    pub y: Vec<f64>,
    pub h: Option<Vec<f64>>,
}

fn fmt_val(v: f64) -> String {
    // 17 significant digits: lossless f64 round-trip.
    format!("{v:.16e}")
}

/// Write a `t,y[,h]` CSV with lossless float serialization.
pub fn write_sim_csv(path: impl AsRef<Path>, y: &[f64], h: Option<&[f64]>) -> Result<()> {
    if let Some(h) = h {
        if h.len() != y.len() {
            return Err(Error::LengthMismatch { left: y.len(), right: h.len() });
        }
    }
    let mut writer = csv::Writer::from_path(path)?;
    match h {
        Some(h) => {
            writer.write_record(["t", "y", "h"])?;
            for (t, (yt, ht)) in y.iter().zip(h).enumerate() {
                writer.write_record([t.to_string(), fmt_val(*yt), fmt_val(*ht)])?;
            }
        }
        None => {
            writer.write_record(["t", "y"])?;
            for (t, yt) in y.iter().enumerate() {
                writer.write_record([t.to_string(), fmt_val(*yt)])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Read a `t,y` or `t,y,h` CSV.
pub fn read_sim_csv(path: impl AsRef<Path>) -> Result<SimSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let has_h = {
        let headers = reader.headers()?;
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        match cols.as_slice() {
            ["t", "y"] => false,
            ["t", "y", "h"] => true,
            other => {
                return Err(ingestion(
                    1,
                    format!("expected header `t,y` or `t,y,h`, got `{}`", other.join(",")),
                ))
            }
        }
    };
    let mut y = Vec::new();
    let mut h = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let field = record.get(idx).ok_or_else(|| ingestion(row, format!("missing {name}")))?;
            field.trim().parse().map_err(|e| ingestion(row, format!("bad {name} `{field}`: {e}")))
        };
        y.push(parse(1, "y")?);
        if has_h {
            let ht = parse(2, "h")?;
            if !(ht > 0.0) {
                return Err(ingestion(row, format!("h = {ht} must be > 0")));
            }
            h.push(ht);
        }
    }
    if y.is_empty() {
        return Err(ingestion(2, "no data rows"));
    }
    Ok(SimSeries { y, h: has_h.then_some(h) })
}

/// Flat key=value run manifest, emitted with every output bundle. Keys keep
/// insertion order so manifests diff cleanly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut m = Self::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("seed", seed);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Parse a flat key=value config file. Blank lines and `#` comments are
/// skipped; later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", i + 1)));
        }
        if let Some(slot) = out.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            out.push((key, value));
        }
    }
    Ok(out)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn price_csv_two_rows() {
        let f = tmp_csv("date,close\n2021-02-01,100\n2021-02-02,110\n");
        let s = load_price_csv(f.path()).unwrap();
        assert_eq!(s.len(), 2);
        let r = s.log_returns().unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0] - 0.09531).abs() < 5e-6, "r = {}", r[0]);
    }

    #[test]
    fn price_csv_zero_close_names_row() {
        let f = tmp_csv("date,close\n2021-02-01,100\n2021-02-02,0\n");
        let err = load_price_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn price_csv_unsorted_dates() {
        let f = tmp_csv("date,close\n2021-02-02,100\n2021-02-01,110\n");
        assert!(load_price_csv(f.path()).is_err());
    }

    #[test]
    fn price_csv_bad_header() {
        let f = tmp_csv("day,price\n2021-02-01,100\n");
        assert!(load_price_csv(f.path()).is_err());
    }

    #[test]
    fn date_filter_inclusive() {
        let f = tmp_csv(
            "date,close\n2021-01-31,1\n2021-02-01,2\n2021-06-01,3\n2024-02-01,4\n2024-02-02,5\n",
        );
        let s = load_price_csv(f.path()).unwrap();
        let from = NaiveDate::from_ymd_opt(2021, 2, 1);
        let to = NaiveDate::from_ymd_opt(2024, 2, 1);
        let filtered = s.filter_dates(from, to);
        assert_eq!(filtered.len(), 3);
        assert_eq!(filtered.close, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sim_csv_roundtrip_lossless() {
        let y = vec![0.1234567890123456, -3.0e-17, 1.0 / 3.0];
        let h = vec![1.5e-4, 2.0, std::f64::consts::PI];
        let f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        write_sim_csv(f.path(), &y, Some(&h)).unwrap();
        let back = read_sim_csv(f.path()).unwrap();
        assert_eq!(back.y, y);
        assert_eq!(back.h.unwrap(), h);

        write_sim_csv(f.path(), &y, None).unwrap();
        let back = read_sim_csv(f.path()).unwrap();
        assert_eq!(back.y, y);
        assert!(back.h.is_none());
    }

    #[test]
    fn sim_csv_rejects_nonpositive_h() {
        let f = tmp_csv("t,y,h\n0,0.1,-1.0\n");
        assert!(read_sim_csv(f.path()).is_err());
    }

    #[test]
    fn manifest_render_and_lookup() {
        let mut m = RunManifest::new("simulate", 42);
        m.push("n", 500);
        assert_eq!(m.get("seed"), Some("42"));
        assert_eq!(m.get("command"), Some("simulate"));
        let text = m.render();
        assert!(text.contains("seed=42\n"));
        assert!(text.contains("n=500\n"));
        // manifest is itself a valid config file
        let parsed = parse_config(&text).unwrap();
        assert!(parsed.iter().any(|(k, v)| k == "n" && v == "500"));
    }

    #[test]
    fn config_parsing() {
        let cfg = parse_config("# comment\n\niters = 100\nseed=7\niters=200\n").unwrap();
        assert_eq!(cfg.len(), 2);
        assert_eq!(cfg[0], ("iters".into(), "200".into()));
        assert_eq!(cfg[1], ("seed".into(), "7".into()));
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_config("=x\n").is_err());
    }
}
