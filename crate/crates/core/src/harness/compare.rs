//! Matched-budget comparison of the nested pyramid tokens against
//! training-free pooling and sampling applied at inference.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::par::Exec;
use crate::token_pyramid::{
    build_pyramid, flatten, inference_pool, sequential_sample, spatial_sample, ScaleSchedule, TokenGrid,
};
use crate::toy_lmm::ModelParams;
use crate::training::{answers_correctly, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    M3,
    AveragePooling,
    SpatialSampling,
    SequentialSampling,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::M3, Method::AveragePooling, Method::SpatialSampling, Method::SequentialSampling];

    pub fn label(self) -> &'static str {
        match self {
            Method::M3 => "m3",
            Method::AveragePooling => "average-pooling",
            Method::SpatialSampling => "spatial-sampling",
            Method::SequentialSampling => "sequential-sampling",
        }
    }

    /// The `k` visual tokens this method feeds the language model.
    pub fn tokens(self, grid: &TokenGrid<f32>, k: usize) -> Result<Array2<f32>> {
        match self {
            Method::M3 => {
                let pyramid = build_pyramid(grid)?;
                let scale = pyramid.scale_with_size(k).ok_or_else(|| {
                    M3Error::InvalidArgument(format!("{k} is not in the schedule {:?}", pyramid.schedule().sizes()))
                })?;
                Ok(flatten(scale))
            }
            Method::AveragePooling => Ok(flatten(&inference_pool(grid, k)?)),
            Method::SpatialSampling => Ok(flatten(&spatial_sample(grid, k)?)),
            Method::SequentialSampling => sequential_sample(grid, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: Method,
    /// Accuracy at each budget, in the order of [`BaselineTable::budgets`].
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub budgets: Vec<usize>,
    pub rows: Vec<BaselineRow>,
}

impl BaselineTable {
    pub fn accuracy(&self, method: Method, k: usize) -> Option<f64> {
        let col = self.budgets.iter().position(|&b| b == k)?;
        self.rows.iter().find(|r| r.method == method).map(|r| r.accuracy[col])
    }

    /// One row per method, one column per budget.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string()];
        header.extend(self.budgets.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.method.label().to_string()];
            rec.extend(row.accuracy.iter().map(|a| format!("{a:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks `budgets` against the pyramid schedule of the model's encoder grid.
pub fn validate_budgets(params: &ModelParams<f32>, budgets: &[usize]) -> Result<ScaleSchedule> {
    let g = params.config().encoder_grid;
    let schedule = build_pyramid(&TokenGrid::<f32>::filled(g, g, 1, 0.0)?)?.schedule().clone();
    if budgets.is_empty() {
        return Err(M3Error::InvalidArgument("no token budgets given".into()));
    }
    if let Some(k) = budgets.iter().find(|k| schedule.index_of(**k).is_none()) {
        return Err(M3Error::InvalidArgument(format!("budget {k} is not in the schedule {:?}", schedule.sizes())));
    }
    Ok(schedule)
}

/// Accuracy of every method at every budget. The pyramid method always uses
/// `params`; the training-free methods use `baseline` when given (a model
/// trained on full-resolution tokens only), else `params`.
pub fn compare_baselines(
    params: &ModelParams<f32>,
    baseline: Option<&ModelParams<f32>>,
    examples: &[Example],
    budgets: &[usize],
    exec: Exec,
) -> Result<BaselineTable> {
    validate_budgets(params, budgets)?;
    if let Some(b) = baseline {
        validate_budgets(b, budgets)?;
    }
    if examples.is_empty() {
        return Err(M3Error::InvalidArgument("no examples to compare on".into()));
    }
    let free = baseline.unwrap_or(params);
    // per example: methods × budgets correctness
    let hits = exec.try_map(examples, |ex| {
        let grid = params.encode_image(&ex.image)?;
        let free_grid = if baseline.is_some() { free.encode_image(&ex.image)? } else { grid.clone() };
        let mut out = Vec::with_capacity(Method::ALL.len() * budgets.len());
        for m in Method::ALL {
            let (model, g) = if m == Method::M3 { (params, &grid) } else { (free, &free_grid) };
            for &k in budgets {
                out.push(answers_correctly(model, m.tokens(g, k)?.view(), ex)?);
            }
        }
        Ok::<_, M3Error>(out)
    })?;
    let n = examples.len() as f64;
    let rows = Method::ALL
        .iter()
        .enumerate()
        .map(|(mi, &method)| BaselineRow {
            method,
            accuracy: (0..budgets.len())
                .map(|ki| hits.iter().filter(|h| h[mi * budgets.len() + ki]).count() as f64 / n)
                .collect(),
        })
        .collect();
    Ok(BaselineTable { budgets: budgets.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TokenGrid<f32> {
        TokenGrid::new(12, 12, 2, (0..288).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn finest_budget_coincides() {
        let g = grid();
        let full = flatten(&g);
        for m in Method::ALL {
            assert_eq!(m.tokens(&g, 144).unwrap(), full, "{}", m.label());
        }
    }

    #[test]
    fn token_counts_match_budget() {
        let g = grid();
        for m in Method::ALL {
            for k in [1, 9, 36] {
                assert_eq!(m.tokens(&g, k).unwrap().nrows(), k);
            }
        }
        assert!(Method::M3.tokens(&g, 16).is_err());
    }

    #[test]
    fn csv_layout() {
        let t = BaselineTable {
            budgets: vec![1, 9],
            rows: vec![BaselineRow { method: Method::M3, accuracy: vec![0.5, 1.0] }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,1,9\nm3,0.5000,1.0000\n");
        assert_eq!(t.accuracy(Method::M3, 9), Some(1.0));
    }
}
