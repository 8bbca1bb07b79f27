//! One-dimensional checks of the smearing and concentration properties, and the
//! sampled triangle inequality for the bounded metric.

use std::collections::HashMap;

use otrecon_core::transport::{build_stencil, metric_cost, sinkhorn, EntropicOTConfig, TransportCost};
use otrecon_core::{DiscreteMeasure, PixelGrid, SeededRng};
use rand::Rng;

use crate::error::CliResult;

/// `exp(−(x − c)²/(2w²))` at cell indices, centered in the array.
pub fn gaussian_bump(cells: usize, width: f64) -> Vec<f64> {
    let c = cells as f64 / 2.0;
    (0..cells)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * width * width)).exp())
        .collect()
}

/// `g` moved by `t` cells, zero-filled.
pub fn shift(g: &[f64], t: i64) -> Vec<f64> {
    let n = g.len() as i64;
    (0..n)
        .map(|x| {
            let s = x - t;
            if (0..n).contains(&s) {
                g[s as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// `dP ∗ g` for `P` uniform on the integer shifts `−bound..=bound`.
pub fn smear(g: &[f64], bound: i64) -> Vec<f64> {
    let w = (2 * bound + 1) as f64;
    let mut out = vec![0.0; g.len()];
    for t in -bound..=bound {
        for (o, v) in out.iter_mut().zip(shift(g, t)) {
            *o += v / w;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub g: Vec<f64>,
    /// Pointwise mean of the sampled shifts, the minimizer of the empirical L2 risk.
    pub empirical: Vec<f64>,
    pub convolution: Vec<f64>,
    /// `‖empirical − convolution‖ / ‖convolution‖`
    pub discrepancy: f64,
}

pub fn prop1(cells: usize, width: f64, bound: i64, samples: usize, seed: u64) -> Prop1Report {
    let g = gaussian_bump(cells, width);
    let mut rng = SeededRng::new(seed, 1);
    let mut counts = vec![0usize; (2 * bound + 1) as usize];
    for _ in 0..samples {
        counts[(rng.random_range(-bound..=bound) + bound) as usize] += 1;
    }
    let mut empirical = vec![0.0; cells];
    for t in -bound..=bound {
        let w = counts[(t + bound) as usize] as f64 / samples as f64;
        if w == 0.0 {
            continue;
        }
        for (e, v) in empirical.iter_mut().zip(shift(&g, t)) {
            *e += w * v;
        }
    }
    let convolution = smear(&g, bound);
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
    let discrepancy = norm(&mut empirical.iter().zip(&convolution).map(|(a, b)| a - b))
        / norm(&mut convolution.iter().copied());
    Prop1Report {
        g,
        empirical,
        convolution,
        discrepancy,
    }
}

/// Composite Simpson rule on `[a, b]` with `panels` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// A law on grid points: `(grid index, probability)`.
pub type Law = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Row {
    pub case: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Prop2Row {
    fn new(case: &str, value: f64, target: f64, tolerance: f64) -> Self {
        Self {
            case: case.to_string(),
            value,
            target,
            tolerance,
            pass: (value - target).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prop2Report {
    pub xs: Vec<f64>,
    /// Quadrature `F(x)` for uniform shifts on `[−1, 1]` and squared cost.
    pub uniform_squared: Vec<f64>,
    /// Quadrature `F(x)` for uniform shifts and the bounded quartic cost.
    pub uniform_quartic: Vec<f64>,
    pub rows: Vec<Prop2Row>,
    /// Largest marginal residual over all Sinkhorn runs.
    pub sinkhorn_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Prop2Config {
    pub half_width: f64,
    pub step: f64,
    pub distributions: usize,
    pub sigma: f64,
    /// Entropy weight as a fraction of the largest cost on the grid.
    pub epsilon: f64,
    pub iterations: usize,
    pub background: f64,
    pub seed: u64,
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// `E_τ[T_ε(δ_τ, δ_x)]` for every grid point `x`, with one Sinkhorn run per
/// `(τ, x)` pair, memoized across laws sharing a cost.
struct BruteForce {
    grid: PixelGrid,
    stencil: otrecon_core::transport::KernelStencil,
    config: EntropicOTConfig,
    memo: HashMap<(usize, usize), f64>,
    residual: f64,
}

impl BruteForce {
    fn new(cells: usize, step: f64, cost: TransportCost, p: &Prop2Config) -> CliResult<Self> {
        let grid = PixelGrid::new(cells, 1, step)?;
        let max_cost = build_stencil(grid, cost, 1.0)?.max_cost();
        let eps = p.epsilon * max_cost;
        Ok(Self {
            grid,
            stencil: build_stencil(grid, cost, eps)?,
            config: EntropicOTConfig::new(eps, p.iterations, p.background)?,
            memo: HashMap::new(),
            residual: 0.0,
        })
    }

    fn pair(&mut self, t: usize, x: usize) -> CliResult<f64> {
        if let Some(v) = self.memo.get(&(t, x)) {
            return Ok(*v);
        }
        let a = DiscreteMeasure::atom(self.grid, t, 0, 1.0);
        let b = DiscreteMeasure::atom(self.grid, x, 0, 1.0);
        let run = sinkhorn(&a, &b, &self.stencil, &self.config)?;
        self.residual = self.residual.max(run.marginal_residual);
        self.memo.insert((t, x), run.value);
        Ok(run.value)
    }

    fn expected(&mut self, law: &Law) -> CliResult<Vec<f64>> {
        (0..self.grid.width())
            .map(|x| {
                law.iter()
                    .map(|&(t, p)| Ok(p * self.pair(t, x)?))
                    .sum::<CliResult<f64>>()
            })
            .collect()
    }
}

pub fn prop2(p: &Prop2Config) -> CliResult<Prop2Report> {
    let cells = (2.0 * p.half_width / p.step).round() as usize + 1;
    let xs: Vec<f64> = (0..cells).map(|k| -p.half_width + k as f64 * p.step).collect();
    let index_of = |x: f64| ((x + p.half_width) / p.step).round() as usize;
    let squared = |t: f64, x: f64| (t - x) * (t - x);
    let quartic_cost = TransportCost::bounded_quartic(p.sigma)?;
    let quartic = |t: f64, x: f64| quartic_cost.between(&[t], &[x]);
    let uniform_f = |c: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        xs.iter()
            .map(|&x| 0.5 * simpson(|t| c(t, x), -1.0, 1.0, 2000))
            .collect()
    };
    let uniform_squared = uniform_f(&squared);
    let uniform_quartic = uniform_f(&quartic);
    let mut rows = Vec::new();

    let example1 = xs
        .iter()
        .zip(&uniform_squared)
        .filter(|(x, _)| x.abs() <= 2.0 + 1e-9)
        .map(|(x, f)| (f - (1.0 / 3.0 + x * x)).abs())
        .fold(0.0, f64::max);
    rows.push(Prop2Row::new("uniform_squared_quadrature_max_error", example1, 0.0, 1e-3));
    rows.push(Prop2Row::new(
        "uniform_squared_argmin",
        xs[argmin(&uniform_squared)],
        0.0,
        p.step,
    ));
    rows.push(Prop2Row {
        pass: true,
        ..Prop2Row::new("uniform_quartic_argmin", xs[argmin(&uniform_quartic)], 0.0, f64::INFINITY)
    });

    // laws on grid points
    let trapezoid: Law = {
        let (lo, hi) = (index_of(-1.0), index_of(1.0));
        let raw: Vec<(usize, f64)> = (lo..=hi)
            .map(|k| (k, if k == lo || k == hi { 0.5 } else { 1.0 }))
            .collect();
        let s: f64 = raw.iter().map(|r| r.1).sum();
        raw.into_iter().map(|(k, w)| (k, w / s)).collect()
    };
    let mut discrete: Vec<(String, Law)> = vec![(
        "two_atoms".to_string(),
        vec![(index_of(-1.0), 0.25), (index_of(3.0), 0.75)],
    )];
    let inner = (index_of(-p.half_width / 2.0), index_of(p.half_width / 2.0));
    for d in 0..p.distributions {
        let mut rng = SeededRng::new(p.seed, 100 + d as u64);
        let atoms = rng.random_range(2..=5usize);
        let raw: Vec<(usize, f64)> = (0..atoms)
            .map(|_| (rng.random_range(inner.0..=inner.1), rng.random_range(0.1..1.1)))
            .collect();
        let s: f64 = raw.iter().map(|r| r.1).sum();
        discrete.push((format!("random_{d}"), raw.into_iter().map(|(k, w)| (k, w / s)).collect()));
    }

    let mut sq = BruteForce::new(cells, p.step, TransportCost::squared_distance(), p)?;
    let mut qu = BruteForce::new(cells, p.step, quartic_cost, p)?;
    for (name, law) in &discrete {
        let f: Vec<f64> = xs
            .iter()
            .map(|&x| law.iter().map(|&(t, w)| w * squared(xs[t], x)).sum())
            .collect();
        let mean: f64 = law.iter().map(|&(t, w)| w * xs[t]).sum();
        let a = argmin(&f);
        rows.push(Prop2Row::new(&format!("{name}_argmin_vs_mean"), xs[a], mean, p.step));
        let bf = argmin(&sq.expected(law)?);
        rows.push(Prop2Row::new(&format!("{name}_sinkhorn_argmin"), xs[bf], xs[a], p.step * 1.000001));
    }
    let bf = argmin(&sq.expected(&trapezoid)?);
    rows.push(Prop2Row::new(
        "uniform_squared_sinkhorn_argmin",
        xs[bf],
        xs[argmin(&uniform_squared)],
        p.step * 1.000001,
    ));
    let bf = argmin(&qu.expected(&trapezoid)?);
    rows.push(Prop2Row::new(
        "uniform_quartic_sinkhorn_argmin",
        xs[bf],
        xs[argmin(&uniform_quartic)],
        p.step * 1.000001,
    ));
    Ok(Prop2Report {
        xs,
        uniform_squared,
        uniform_quartic,
        rows,
        sinkhorn_residual: sq.residual.max(qu.residual),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub exponent: f64,
    pub triples: u64,
    /// Triples with `d(x,z) > d(x,y) + d(y,z) + 10⁻¹²`.
    pub violations: u64,
    /// Largest `d(x,z) − d(x,y) − d(y,z)`.
    pub max_excess: f64,
    pub max_asymmetry: f64,
    pub max_self_distance: f64,
}

pub fn metric_check(exponent: f64, triples: u64, seed: u64, stream: u64) -> MetricRow {
    let mut rng = SeededRng::new(seed, stream);
    let mut point = || [rng.random_range(-100.0..=100.0), rng.random_range(-100.0..=100.0)];
    let mut row = MetricRow {
        exponent,
        triples,
        violations: 0,
        max_excess: f64::NEG_INFINITY,
        max_asymmetry: 0.0,
        max_self_distance: 0.0,
    };
    for _ in 0..triples {
        let (x, y, z) = (point(), point(), point());
        let d = |a: &[f64; 2], b: &[f64; 2]| metric_cost(a, b, exponent);
        let excess = d(&x, &z) - d(&x, &y) - d(&y, &z);
        if excess > 1e-12 {
            row.violations += 1;
        }
        row.max_excess = row.max_excess.max(excess);
        row.max_asymmetry = row.max_asymmetry.max((d(&x, &y) - d(&y, &x)).abs());
        row.max_self_distance = row.max_self_distance.max(d(&x, &x));
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shift_reproduces_g_exactly() {
        let r = prop1(64, 5.0, 0, 100, 3);
        assert_eq!(r.empirical, r.g);
        assert_eq!(r.convolution, r.g);
        assert_eq!(r.discrepancy, 0.0);
    }

    #[test]
    fn smeared_delta_is_a_boxcar() {
        let mut d = vec![0.0; 41];
        d[20] = 1.0;
        let s = smear(&d, 3);
        for (i, v) in s.iter().enumerate() {
            let want = if (17..=23).contains(&i) { 1.0 / 7.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn monte_carlo_mean_approaches_convolution() {
        let r = prop1(256, 8.0, 8, 10_000, 0);
        assert!(r.discrepancy <= 0.02, "{}", r.discrepancy);
        let mass = |v: &[f64]| v.iter().sum::<f64>();
        assert!((mass(&r.convolution) - mass(&r.g)).abs() < 1e-9);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(|t| t * t * t - 2.0 * t + 1.0, -1.0, 2.0, 4);
        assert!((v - (15.0 / 4.0 - 3.0 + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn concentration_checks_pass() {
        let r = prop2(&Prop2Config {
            half_width: 4.0,
            step: 0.2,
            distributions: 3,
            sigma: 1.0,
            epsilon: 0.05,
            iterations: 50,
            background: 1e-9,
            seed: 5,
        })
        .unwrap();
        for row in &r.rows {
            assert!(row.pass, "{row:?}");
        }
        let two = r.rows.iter().find(|r| r.case == "two_atoms_argmin_vs_mean").unwrap();
        assert!((two.value - 2.0).abs() < 1e-12);
        let i0 = r.xs.iter().position(|x| x.abs() < 1e-12).unwrap();
        assert!((r.uniform_squared[i0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metric_has_no_violations() {
        for n in [1.0, 2.0, 4.0] {
            let r = metric_check(n, 20_000, 1, n as u64);
            assert_eq!(r.violations, 0);
            assert!(r.max_asymmetry <= 1e-15);
            assert_eq!(r.max_self_distance, 0.0);
        }
    }
}
