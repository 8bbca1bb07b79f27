use crate::error::{Error, Result};

/// Shape of the pointwise transport cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostForm {
    /// `c(x0, x1) = |x0 - x1|^2`
    SquaredDistance,
    /// `c(x0, x1) = 1 - exp(-|x0 - x1|^4 / sigma^4)`, bounded by one.
    BoundedQuartic { sigma: f64 },
}

/// A translation-invariant transport cost together with the exponent `p`
/// for which `c^(1/p)` is a metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportCost {
    form: CostForm,
    exponent: f64,
}

impl TransportCost {
    pub fn squared_distance() -> Self {
        Self {
            form: CostForm::SquaredDistance,
            exponent: 2.0,
        }
    }

    pub fn bounded_quartic(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "cost scale must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            form: CostForm::BoundedQuartic { sigma },
            exponent: 4.0,
        })
    }

    pub fn form(&self) -> CostForm {
        self.form
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Cost as a function of the squared Euclidean distance.
    #[inline]
    pub fn from_dist_sq(&self, d2: f64) -> f64 {
        match self.form {
            CostForm::SquaredDistance => d2,
            CostForm::BoundedQuartic { sigma } => {
                let r = d2 / (sigma * sigma);
                -(-(r * r)).exp_m1()
            }
        }
    }

    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let d2 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.from_dist_sq(d2)
    }
}
