//! The rank-4 feature map type and small shape helpers.

use ndarray::{Array4, ArrayD, Ix4};

use crate::error::{Error, Result};

/// A batch of feature maps laid out as (batch, channels, height, width).
///
/// Construction validates the invariants once; the inner array is then free
/// to move through the graph without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array4<f64>);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "feature map dims must all be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("feature map contains non-finite entries"));
        }
        Ok(Self(data))
    }

    pub fn from_dyn(data: ArrayD<f64>) -> Result<Self> {
        let data = data
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::config("feature map must be rank 4"))?;
        Self::new(data)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }

    pub fn into_dyn(self) -> ArrayD<f64> {
        self.0.into_dyn()
    }
}

/// Extract (n, c, h, w) from a dynamic-rank array, erroring on other ranks.
pub fn dims4(a: &ArrayD<f64>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::config(format!(
            "{what}: expected rank-4 (n,c,h,w) tensor, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}
