use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::stream::StepRecord;

/// Column order of per-step CSV files.
pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "ssim",
    "psnr",
    "loss_pixel",
    "loss_feature",
    "loss_latent",
    "loss_total",
    "boundary",
    "predict_secs",
    "adapt_secs",
    "adapted",
    "prediction_hash",
];

/// Shortest rendering with 9 significant digits, like C's `%.9g`.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn row(r: &StepRecord) -> String {
    let f = format_sig9;
    let latent = r.loss.latent.map(f).unwrap_or_default();
    [
        r.step.to_string(),
        f(r.ssim),
        f(r.psnr),
        f(r.loss.pixel),
        f(r.loss.feature),
        latent,
        f(r.loss.total),
        f(r.boundary),
        f(r.predict_secs),
        f(r.adapt_secs),
        u8::from(r.adapted).to_string(),
        format!("{:016x}", r.prediction_hash),
    ]
    .join(",")
}

/// Header plus one row per record. Refuses to create a file for an empty list.
pub fn write_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to write".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = CSV_COLUMNS.join(",");
    body.push('\n');
    for r in records {
        body.push_str(&row(r));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-2.0 / 3.0), "-0.666666667");
        assert_eq!(format_sig9(123456789.0), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.0001234), "0.0001234");
        assert_eq!(format_sig9(100.0), "100");
    }

    #[test]
    fn sig9_parses_back_within_precision() {
        for &v in &[std::f64::consts::PI, 1e-300, -7.123456789123e12, 0.999999999999, 42.0] {
            let back: f64 = format_sig9(v).parse().unwrap();
            assert!((back - v).abs() <= 5e-9 * v.abs(), "{v} -> {back}");
        }
    }
}
