use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and population standard deviation of one feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Empty(format!(
                "z-score needs at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        // relative test: rounding leaves tiny spread on constant columns
        if !(std > 1e-12 * mean.abs().max(1e-300)) {
            return Err(Error::ZeroVariance);
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Standardizes `column`; returns the statistics used so they can be
/// reapplied to unseen data.
pub fn zscore_normalize(column: &[f64]) -> Result<(Vec<f64>, ZScore)> {
    let z = ZScore::fit(column)?;
    Ok((column.iter().map(|&v| z.apply(v)).collect(), z))
}

/// Per-column statistics for a row-major feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub columns: Vec<ZScore>,
}

impl ColumnScaler {
    /// Fits each of `cols` columns independently. A constant column gets
    /// `fallback` (or σ = 1 when none is given) instead of failing.
    pub fn fit(data: &[f64], cols: usize, fallback: Option<&ColumnScaler>) -> Result<Self> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {cols}",
                data.len()
            )));
        }
        let columns = (0..cols)
            .map(|c| {
                let col: Vec<f64> = data.iter().skip(c).step_by(cols).copied().collect();
                match ZScore::fit(&col) {
                    Ok(z) => Ok(z),
                    Err(Error::ZeroVariance) => Ok(fallback.map_or_else(
                        || ZScore {
                            mean: col.first().copied().unwrap_or(0.0),
                            std: 1.0,
                        },
                        |f| f.columns[c],
                    )),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns })
    }

    pub fn apply(&self, data: &mut [f64]) {
        let cols = self.columns.len();
        for (i, v) in data.iter_mut().enumerate() {
            *v = self.columns[i % cols].apply(*v);
        }
    }
}
