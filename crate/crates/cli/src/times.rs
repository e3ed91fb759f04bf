//! Prediction time grids: `start:step:end` ranges or a file of times.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

/// Parses `start:step:end`. The end point is included when it falls on the
/// step grid up to rounding.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    ensure!(!text.is_empty(), "empty times, expected start:step:end");
    let parts: Vec<&str> = text.split(':').collect();
    ensure!(parts.len() == 3, "times must be start:step:end, got {text:?}");
    let mut nums = [0.0f64; 3];
    for (n, p) in nums.iter_mut().zip(&parts) {
        *n = p
            .trim()
            .parse()
            .with_context(|| format!("invalid number {p:?} in times {text:?}"))?;
    }
    let [start, step, end] = nums;
    ensure!(
        start.is_finite() && step.is_finite() && end.is_finite(),
        "times must be finite, got {text:?}"
    );
    ensure!(step > 0.0, "time step must be positive, got {step}");
    ensure!(end >= start, "end time {end} is before start time {start}");
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

/// Reads one time per line; blank lines and lines starting with `#` are
/// skipped.
pub fn parse_list(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut times = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line
            .parse()
            .with_context(|| format!("{}:{}: invalid time {line:?}", path.display(), i + 1))?;
        if !t.is_finite() {
            bail!("{}:{}: time must be finite", path.display(), i + 1);
        }
        if let Some(&last) = times.last() {
            ensure!(t > last, "{}:{}: times must be strictly increasing", path.display(), i + 1);
        }
        times.push(t);
    }
    ensure!(!times.is_empty(), "{}: no times found", path.display());
    Ok(times)
}

pub fn read_list(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading times {}", path.display()))?;
    parse_list(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inclusive_range() {
        assert_eq!(parse_range("0:0.5:2").unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(parse_range("1:1:1").unwrap(), vec![1.0]);
        // 0.1 steps accumulate rounding but still reach the end
        assert_eq!(parse_range("0:0.1:1").unwrap().len(), 11);
    }

    #[test]
    fn end_off_grid_is_not_included() {
        assert_eq!(parse_range("0:2:5").unwrap(), vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn malformed_ranges() {
        for bad in ["", "  ", "0:1", "0:0:1", "0:-1:1", "2:1:1", "a:1:2", "0:1:inf"] {
            assert!(parse_range(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn list_skips_comments() {
        let p = Path::new("times.txt");
        assert_eq!(parse_list("# t\n0\n\n1.5\n", p).unwrap(), vec![0.0, 1.5]);
        assert!(parse_list("1\n1\n", p).is_err());
        assert!(parse_list("# nothing\n", p).is_err());
        let err = parse_list("0\nx\n", p).unwrap_err().to_string();
        assert!(err.contains("times.txt:2"), "{err}");
    }
}
