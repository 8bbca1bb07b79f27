use super::cost::TransportCost;
use super::exact::{exact_transport_atoms, Atom};
use crate::error::Result;

/// `W_p = value^(1/p)`.
pub fn wasserstein_p(value: f64, p: f64) -> f64 {
    assert!(value >= 0.0, "transport value must be nonnegative, got {value}");
    assert!(p >= 1.0, "exponent must be at least one, got {p}");
    value.powf(1.0 / p)
}

/// `(1 - exp(-|x1 - x2|^n))^(1/n)`, the distance whose `n`-th power is the
/// bounded cost family.
pub fn metric_cost(x1: &[f64], x2: &[f64], n: f64) -> f64 {
    assert!(n >= 1.0, "metric exponent must be at least one, got {n}");
    assert_eq!(x1.len(), x2.len(), "points of different dimension");
    let d = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if d == 0.0 {
        return 0.0;
    }
    (-(-d.powf(n)).exp_m1()).powf(1.0 / n)
}

/// Exact `W_p` between atom lists for a cost with metric exponent `p`.
pub fn exact_wasserstein(source: &[Atom], target: &[Atom], cost: &TransportCost) -> Result<f64> {
    let value = exact_transport_atoms(source, target, cost)?;
    Ok(wasserstein_p(value.max(0.0), cost.exponent()))
}
