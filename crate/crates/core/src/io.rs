//! Plain-text formats: distributions as a JSON array or one probability per
//! line, count vectors and raw samples as one integer per line.

use std::path::Path;

use crate::distmodel::DiscreteDistribution;
use crate::error::{Error, Result};

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses a JSON array of weights or a one-value-per-line list. A line may
/// carry extra comma-separated fields; the last one is taken as the value.
pub fn parse_distribution(text: &str) -> Result<DiscreteDistribution> {
    let trimmed = text.trim_start();
    let raw: Vec<f64> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::Parse(e.to_string()))?
    } else {
        non_empty_lines(text)
            .map(|(n, line)| {
                let field = line.rsplit(',').next().unwrap_or(line).trim();
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {n}: '{line}' is not a number")))
            })
            .collect::<Result<_>>()?
    };
    DiscreteDistribution::new(raw)
}

/// Parses one non-negative integer per line.
pub fn parse_counts(text: &str) -> Result<Vec<u64>> {
    non_empty_lines(text)
        .map(|(n, line)| {
            line.parse::<u64>()
                .map_err(|_| Error::Parse(format!("line {n}: '{line}' is not a count")))
        })
        .collect()
}

/// Parses one category index (0-based) per line, checking it against `d`.
pub fn parse_samples(text: &str, d: usize) -> Result<Vec<usize>> {
    non_empty_lines(text)
        .map(|(n, line)| {
            let v = line
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("line {n}: '{line}' is not a category")))?;
            if v >= d {
                return Err(Error::CategoryOutOfRange { value: v, d });
            }
            Ok(v)
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_distribution(path: &Path) -> Result<DiscreteDistribution> {
    parse_distribution(&read(path)?)
}

pub fn read_counts(path: &Path) -> Result<Vec<u64>> {
    parse_counts(&read(path)?)
}

pub fn read_samples(path: &Path, d: usize) -> Result<Vec<usize>> {
    parse_samples(&read(path)?, d)
}

/// One probability per line, written with round-trip precision.
pub fn format_distribution(pi: &DiscreteDistribution) -> String {
    pi.probs().iter().map(|p| format!("{p}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distributions_in_both_formats() {
        let a = parse_distribution("[1, 1, 2]").unwrap();
        let b = parse_distribution("0.25\n0.25\n\n0.5\n").unwrap();
        assert_eq!(a, b);
        let c = parse_distribution("# header\n0,0.25\n1,0.25\n2,0.5\n").unwrap();
        assert_eq!(a, c);
        assert!(matches!(
            parse_distribution("0.5\nabc\n"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_distribution("[0.5, -0.1]"),
            Err(Error::NegativeEntry { .. })
        ));
    }

    #[test]
    fn format_round_trips() {
        let pi = parse_distribution("[0.1, 0.2, 0.7]").unwrap();
        assert_eq!(parse_distribution(&format_distribution(&pi)).unwrap(), pi);
    }

    #[test]
    fn counts_and_samples() {
        assert_eq!(parse_counts("3\n0\n 7 \n").unwrap(), vec![3, 0, 7]);
        assert!(parse_counts("3\n-1\n").is_err());
        assert_eq!(parse_samples("0\n2\n1\n", 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(
            parse_samples("0\n3\n", 3),
            Err(Error::CategoryOutOfRange { value: 3, d: 3 })
        );
    }
}
