use ndarray::Array2;

use crate::error::{Error, Result};

/// An unordered set of 3D points with an optional per-point feature matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// N×C features; row `i` belongs to `positions[i]`.
    pub features: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Self {
        Self {
            positions,
            features: None,
        }
    }

    pub fn with_features(positions: Vec<[f64; 3]>, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != positions.len() {
            return Err(Error::dim(
                "PointCloud::with_features",
                positions.len(),
                features.dim(),
            ));
        }
        Ok(Self {
            positions,
            features: Some(features),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::RejectedInput(format!(
                    "point {i} has non-finite coordinates {p:?}"
                )));
            }
        }
        Ok(())
    }

    /// Positions as an N×3 matrix.
    pub fn position_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), 3));
        for (i, p) in self.positions.iter().enumerate() {
            m[[i, 0]] = p[0];
            m[[i, 1]] = p[1];
            m[[i, 2]] = p[2];
        }
        m
    }

    /// Axis-aligned bounds, `None` when empty.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }
}
