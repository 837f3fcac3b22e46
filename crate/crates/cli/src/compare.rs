//! Directional checks between two summaries.

use std::fmt;
use std::str::FromStr;

use crate::report::Summary;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Less,
    Greater,
}

impl FromStr for Direction {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "<" | "lt" => Ok(Direction::Less),
            ">" | "gt" => Ok(Direction::Greater),
            other => Err(HarnessError::Usage(format!(
                "unknown direction `{other}`; expected <, >, lt or gt"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Less => "<",
            Direction::Greater => ">",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub metric: String,
    pub direction: Direction,
    pub mean_a: f64,
    pub mean_b: f64,
    pub pooled_std: f64,
    pub margin: f64,
    pub passed: bool,
    pub label_a: String,
    pub label_b: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} {} {:.4} {} {} {:.4} (margin {} x pooled std {:.4})",
            if self.passed { "PASS" } else { "FAIL" },
            self.metric,
            self.label_a,
            self.mean_a,
            self.direction,
            self.label_b,
            self.mean_b,
            self.margin,
            self.pooled_std
        )
    }
}

/// `sqrt((s_a² + s_b²) / 2)`; a missing std (single episode) counts as 0.
pub fn pooled_std(std_a: Option<f64>, std_b: Option<f64>) -> f64 {
    let a = std_a.unwrap_or(0.0);
    let b = std_b.unwrap_or(0.0);
    ((a * a + b * b) / 2.0).sqrt()
}

/// Passes when `mean_a` beats `mean_b` in `direction` by more than
/// `margin` pooled standard deviations.
pub fn compare(a: &Summary, b: &Summary, metric: &str, direction: Direction, margin: f64) -> Result<Verdict> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(HarnessError::Usage(format!("margin {margin} must be a finite value >= 0")));
    }
    if a.environments != b.environments {
        return Err(HarnessError::Summary(format!(
            "summaries have {} and {} environments",
            a.environments, b.environments
        )));
    }
    let sa = a.metric(metric)?;
    let sb = b.metric(metric)?;
    let pooled = pooled_std(sa.std, sb.std);
    let gap = margin * pooled;
    let passed = match direction {
        Direction::Less => sa.mean + gap < sb.mean,
        Direction::Greater => sa.mean - gap > sb.mean,
    };
    Ok(Verdict {
        metric: metric.into(),
        direction,
        mean_a: sa.mean,
        mean_b: sb.mean,
        pooled_std: pooled,
        margin,
        passed,
        label_a: a.learner.to_string(),
        label_b: b.learner.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_std_of_equal_spreads() {
        assert_eq!(pooled_std(Some(0.1), Some(0.1)), 0.1);
        assert_eq!(pooled_std(None, None), 0.0);
        assert!((pooled_std(Some(3.0), Some(4.0)) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn directions_parse() {
        assert_eq!("<".parse::<Direction>().unwrap(), Direction::Less);
        assert_eq!("gt".parse::<Direction>().unwrap(), Direction::Greater);
        assert!("<=".parse::<Direction>().is_err());
    }
}
