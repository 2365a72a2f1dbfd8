//! Distribution quantiles from a third-party statistics library.

use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn chi_squared_quantile(dof: f64, p: f64) -> f64 {
    ChiSquared::new(dof).expect("positive degrees of freedom").inverse_cdf(p)
}
