//! Per-sample oracle scale selection, fixed-scale accuracy curves and
//! token-budget arithmetic.
//!
//! The oracle picks, for each sample, the smallest scale that answers
//! correctly. Samples wrong at every scale are charged the smallest scale and
//! counted incorrect.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::par::Exec;
use crate::token_pyramid::ScaleSchedule;

/// Per-sample, per-scale correctness (coarsest scale first).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectnessMatrix {
    schedule: ScaleSchedule,
    ids: Vec<String>,
    rows: Vec<Vec<bool>>,
}

impl CorrectnessMatrix {
    pub fn new(schedule: ScaleSchedule, ids: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(M3Error::InvalidArgument(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != schedule.len()) {
            return Err(M3Error::Dimension(format!(
                "row {i} has {} entries, schedule has {} scales",
                r.len(),
                schedule.len()
            )));
        }
        Ok(Self { schedule, ids, rows })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps the rows whose index satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let (ids, rows) = self
            .ids
            .iter()
            .zip(&self.rows)
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, (id, r))| (id.clone(), r.clone()))
            .unzip();
        Self { schedule: self.schedule.clone(), ids, rows }
    }

    /// CSV with header `sample_id,<size_1>,...,<size_M>` and 0/1 entries.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.schedule.sizes().iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("sample_id") {
            return Err(M3Error::Format("correctness CSV must start with a `sample_id` column".into()));
        }
        let sizes = header
            .iter()
            .skip(1)
            .map(|h| h.parse::<usize>().map_err(|_| M3Error::Format(format!("column `{h}` is not a token count"))))
            .collect::<Result<Vec<_>>>()?;
        let schedule = ScaleSchedule::new(sizes).map_err(|e| M3Error::Format(e.to_string()))?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != schedule.len() + 1 {
                return Err(M3Error::Format(format!("record {} has {} fields", line + 1, rec.len())));
            }
            ids.push(rec[0].to_string());
            rows.push(
                rec.iter()
                    .skip(1)
                    .map(|v| match v {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        other => Err(M3Error::Format(format!("entry `{other}` in record {} is not 0/1", line + 1))),
                    })
                    .collect::<Result<Vec<bool>>>()?,
            );
        }
        Self::new(schedule, ids, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleChoice {
    /// Token count of the chosen scale.
    pub tokens: usize,
    pub correct: bool,
}

/// Smallest scale whose entry is true; all-false rows fall back to the
/// smallest scale, flagged incorrect.
pub fn oracle_select(row: &[bool], schedule: &ScaleSchedule) -> Result<OracleChoice> {
    if row.len() != schedule.len() {
        return Err(M3Error::Dimension(format!(
            "row has {} entries, schedule has {} scales",
            row.len(),
            schedule.len()
        )));
    }
    Ok(match row.iter().position(|&ok| ok) {
        Some(i) => OracleChoice { tokens: schedule.sizes()[i], correct: true },
        None => OracleChoice { tokens: schedule.smallest(), correct: false },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schedule: ScaleSchedule,
    pub samples: usize,
    pub mean_tokens: f64,
    pub oracle_accuracy: f64,
    /// Accuracy at each fixed scale, coarsest first.
    pub fixed_scale_accuracy: Vec<f64>,
    pub chosen_tokens: Vec<usize>,
    pub chosen_correct: Vec<bool>,
}

pub fn oracle_aggregate(matrix: &CorrectnessMatrix, exec: Exec) -> Result<OracleReport> {
    if matrix.is_empty() {
        return Err(M3Error::InvalidArgument("correctness matrix is empty".into()));
    }
    let choices = exec.try_map(matrix.rows(), |r| oracle_select(r, matrix.schedule()))?;
    let n = choices.len() as f64;
    let mean_tokens = choices.iter().map(|c| c.tokens as f64).sum::<f64>() / n;
    let oracle_accuracy = choices.iter().filter(|c| c.correct).count() as f64 / n;
    Ok(OracleReport {
        schedule: matrix.schedule().clone(),
        samples: choices.len(),
        mean_tokens,
        oracle_accuracy,
        fixed_scale_accuracy: accuracy_curve(matrix)?,
        chosen_tokens: choices.iter().map(|c| c.tokens).collect(),
        chosen_correct: choices.iter().map(|c| c.correct).collect(),
    })
}

/// Fraction correct at each fixed scale, coarsest to finest.
pub fn accuracy_curve(matrix: &CorrectnessMatrix) -> Result<Vec<f64>> {
    if matrix.is_empty() {
        return Err(M3Error::InvalidArgument("correctness matrix is empty".into()));
    }
    let n = matrix.len() as f64;
    Ok((0..matrix.schedule().len())
        .map(|i| matrix.rows().iter().filter(|r| r[i]).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub units: usize,
    pub tokens_per_unit: usize,
}

/// For each scale size `s` that fits, `(budget / s, s)`: e.g. how many video
/// frames a fixed visual-token budget covers at each per-frame resolution.
pub fn budget_allocations(budget: usize, schedule: &ScaleSchedule) -> Result<Vec<Allocation>> {
    if budget < schedule.smallest() {
        return Err(M3Error::InvalidArgument(format!(
            "budget {budget} is below the smallest scale {}",
            schedule.smallest()
        )));
    }
    Ok(schedule
        .sizes()
        .iter()
        .filter(|&&s| s <= budget)
        .map(|&s| Allocation { units: budget / s, tokens_per_unit: s })
        .collect())
}
