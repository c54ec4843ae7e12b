//! Accuracy matrix and the average-accuracy / average-forgetting summaries.
//!
//! Task indices in the public summaries are 1-based, `t ∈ 1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular `S[t][i]`: accuracy on task `i`'s test set after training task `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new() -> Self {
        ScoreMatrix::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut s = ScoreMatrix::new();
        for r in rows {
            s.push_row(r)?;
        }
        Ok(s)
    }

    /// Appends the row for the next task; it must hold one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::IncompleteHistory(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("scores must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `S[t][i]`, 1-based, defined for `i ≤ t`.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if i == 0 || i > t {
            return None;
        }
        self.rows.get(t - 1).map(|r| r[i - 1])
    }

    fn row(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::IncompleteHistory(format!(
                "row {t} requested, {} recorded",
                self.rows.len()
            )));
        }
        Ok(&self.rows[t - 1])
    }

    /// CSV with a header `after_task,task_1,...,task_T`; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let n = self.rows.len();
        let mut out = String::from("after_task");
        for i in 1..=n {
            out.push_str(&format!(",task_{i}"));
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for i in 0..n {
                out.push(',');
                if let Some(v) = row.get(i) {
                    out.push_str(&format!("{v:?}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        ScoreMatrix::from_rows(rows)
    }
}

/// `A_t = (1/t) Σ_{i ≤ t} S[t][i]`.
pub fn average_accuracy(s: &ScoreMatrix, t: usize) -> Result<f64> {
    Ok(running_mean(s.row(t)?.iter().copied()))
}

/// Incremental mean; a constant sequence averages to exactly that constant.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (k, v) in values.enumerate() {
        m += (v - m) / (k + 1) as f64;
    }
    m
}

/// `F_t`: for each past task `i < t`, the best accuracy it ever had among
/// rows `i ..= t−1` minus its accuracy after task `t`, averaged over `i`.
pub fn average_forgetting(s: &ScoreMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("forgetting needs t >= 2, got {t}")));
    }
    let last = s.row(t)?;
    let drops = (1..t).map(|i| {
        let best = (i..t)
            .map(|ip| s.get(ip, i).expect("defined entry"))
            .fold(f64::NEG_INFINITY, f64::max);
        best - last[i - 1]
    });
    Ok(running_mean(drops))
}
