//! Tabular and JSON artifacts. Numbers in CSV files carry 10 significant
//! digits; column order and headers are fixed.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::inference::UniformBand;
use crate::{Error, Result};

pub const BAND_HEADER: [&str; 7] = ["grid", "estimate", "se", "pw_low", "pw_high", "band_low", "band_high"];
pub const TRUTH_HEADER: [&str; 2] = ["grid", "truth"];
pub const VALIDATION_HEADER: [&str; 9] = [
    "grid",
    "truth",
    "mean_estimate",
    "bias",
    "rmse",
    "sd_estimate",
    "mean_se",
    "pointwise_coverage",
    "band_coverage",
];

/// `%.10g`: ten significant digits, trailing zeros trimmed, exponent form
/// outside `[1e-4, 1e10)`.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.9e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..10).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (9 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e)
}

pub fn write_band<W: Write>(band: &UniformBand, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(BAND_HEADER).map_err(csv_err)?;
    for i in 0..band.grid.len() {
        let row = [
            band.grid[i],
            band.estimate[i],
            band.se[i],
            band.pointwise_low[i],
            band.pointwise_high[i],
            band.band_low[i],
            band.band_high[i],
        ];
        w.write_record(row.iter().map(|v| fmt_num(*v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth<W: Write>(grid: &[f64], truth: &[f64], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRUTH_HEADER).map_err(csv_err)?;
    for (g, t) in grid.iter().zip(truth) {
        w.write_record([fmt_num(*g), fmt_num(*t)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `grid,truth` file.
pub fn read_truth<R: Read>(source: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != TRUTH_HEADER {
        return Err(Error::Config(format!("truth file header must be `grid,truth`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let (mut grid, mut truth) = (Vec::new(), Vec::new());
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let parse = |k: usize| {
            record[k]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("truth file row {}: `{}` is not a number", line + 1, &record[k])))
        };
        grid.push(parse(0)?);
        truth.push(parse(1)?);
    }
    Ok((grid, truth))
}

/// Per-grid-point Monte Carlo summary of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub grid: f64,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    pub sd_estimate: f64,
    pub mean_se: f64,
    pub pointwise_coverage: f64,
    pub band_coverage: f64,
}

pub fn write_validation<W: Write>(rows: &[ValidationRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(VALIDATION_HEADER).map_err(csv_err)?;
    for r in rows {
        let values = [
            r.grid,
            r.truth,
            r.mean_estimate,
            r.bias,
            r.rmse,
            r.sd_estimate,
            r.mean_se,
            r.pointwise_coverage,
            r.band_coverage,
        ];
        w.write_record(values.iter().map(|v| fmt_num(*v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `band_<modifier>.csv`, or `band_<modifier>_<column>=<value>.csv` within
/// a stratum.
pub fn band_file_name(modifier: &str, stratum: Option<(&str, f64)>) -> String {
    match stratum {
        None => format!("band_{modifier}.csv"),
        Some((column, value)) => format!("band_{modifier}_{column}={}.csv", fmt_num(value)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.3333333333"),
            (2.0 / 3.0, "0.6666666667"),
            (123456.789012345, "123456.789"),
            (9999999999.0, "9999999999"),
            (12345678901.0, "1.23456789e+10"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-1.5e-7, "-1.5e-07"),
            (1.959963984540054, "1.959963985"),
            (0.99999999999, "1"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_num(x), want, "{x}");
        }
    }

    #[test]
    fn formatted_values_parse_back_within_precision() {
        for x in [std::f64::consts::PI, -1e-3 / 7.0, 4.2e12, 7.0 / 9.0 * 1e-9] {
            let back: f64 = fmt_num(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-9);
        }
    }

    #[test]
    fn band_layout() {
        let band = UniformBand {
            grid: vec![0.0, 0.5],
            estimate: vec![0.1, 0.2],
            se: vec![0.05, 0.05],
            alpha: 0.05,
            z: 1.96,
            pointwise_low: vec![0.0, 0.1],
            pointwise_high: vec![0.2, 0.3],
            critical_value: 2.5,
            band_low: vec![-0.025, 0.075],
            band_high: vec![0.225, 0.325],
            replicates: 200,
            seed: 1,
            redrawn: 0,
            band_contains_pointwise: true,
        };
        let mut buf = Vec::new();
        write_band(&band, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "grid,estimate,se,pw_low,pw_high,band_low,band_high");
        assert_eq!(lines[1], "0,0.1,0.05,0,0.2,-0.025,0.225");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn truth_round_trip_and_header_check() {
        let mut buf = Vec::new();
        write_truth(&[0.0, 0.5, 1.0], &[0.2, 0.2, 0.2], &mut buf).unwrap();
        let (g, t) = read_truth(buf.as_slice()).unwrap();
        assert_eq!(g, vec![0.0, 0.5, 1.0]);
        assert_eq!(t, vec![0.2; 3]);
        assert!(read_truth("x,truth\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn file_names() {
        assert_eq!(band_file_name("ef", None), "band_ef.csv");
        assert_eq!(band_file_name("ef", Some(("prior_mi", 1.0))), "band_ef_prior_mi=1.csv");
    }
}
