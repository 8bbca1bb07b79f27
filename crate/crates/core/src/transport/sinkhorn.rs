//! Fixed-depth Sinkhorn scaling and its exact reverse-mode derivative.

use super::stencil::{KernelMethod, KernelStencil};
use crate::error::{Error, Result};
use crate::grid::{add_background, mass, DiscreteMeasure};

/// Relative tolerance on `|mass(mu0) - mass(mu1)|`.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropicOTConfig {
    pub epsilon: f64,
    pub iterations: usize,
    /// Uniform floor added to both marginals before scaling, as a fraction of their mass.
    pub rho: f64,
    pub method: KernelMethod,
}

impl EntropicOTConfig {
    pub fn new(epsilon: f64, iterations: usize, rho: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            iterations,
            rho,
            method: KernelMethod::Auto,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_method(mut self, method: KernelMethod) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Precondition(format!(
                "entropy weight must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Precondition(
                "Sinkhorn needs at least one iteration".into(),
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Precondition(format!(
                "background level must be nonnegative, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Record of one Sinkhorn run.
///
/// `v[0]` is the all-ones start; `u[0]` is not part of the recurrence and is stored as
/// ones so both trajectories have `N + 1` entries.
#[derive(Debug, Clone)]
pub struct SinkhornRun {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// `u_Nᵀ (K ⊙ C) v_N`
    pub value: f64,
    /// Max-norm gap of the final plan's row sums to `mu0` and column sums to `mu1`.
    pub marginal_residual: f64,
    /// `K v_{i-1}` and `Kᵀ u_i` for `i = 1..=N`.
    row_denominators: Vec<Vec<f64>>,
    col_denominators: Vec<Vec<f64>>,
    /// Marginals after the background floor.
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    rho: f64,
    method: KernelMethod,
}

impl SinkhornRun {
    pub fn iterations(&self) -> usize {
        self.v.len().saturating_sub(1)
    }

    /// Source marginal after the background floor.
    pub fn source(&self) -> &[f64] {
        &self.mu0
    }

    /// Target marginal after the background floor.
    pub fn target(&self) -> &[f64] {
        &self.mu1
    }

    /// The regularized plan `diag(u_N) K diag(v_N)` as a dense matrix. Test-sized grids only.
    pub fn plan(&self, stencil: &KernelStencil) -> Vec<Vec<f64>> {
        let n = self.mu0.len();
        let (u, v) = (self.u.last().unwrap(), self.v.last().unwrap());
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let mut e = vec![0.0; n];
            e[r] = u[r];
            let row = stencil.apply_kernel_with(&e, self.method);
            rows.push(row.iter().zip(v).map(|(k, vv)| k * vv).collect());
        }
        rows
    }
}

fn check_positive(values: &[f64], what: &str, iteration: usize) -> Result<()> {
    if let Some(k) = values.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::breakdown(
            format!("Sinkhorn iteration {iteration}"),
            format!("{what}[{k}] = {}", values[k]),
        ));
    }
    Ok(())
}

/// Run exactly `config.iterations` scaling steps
/// `u_i = mu0 ./ (K v_{i-1})`, `v_i = mu1 ./ (Kᵀ u_i)` from `v_0 = 1`.
pub fn sinkhorn(
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    stencil: &KernelStencil,
    config: &EntropicOTConfig,
) -> Result<SinkhornRun> {
    config.validate()?;
    if mu0.grid() != stencil.grid() || mu1.grid() != stencil.grid() {
        return Err(Error::Contract(
            "marginals and stencil live on different grids".into(),
        ));
    }
    if !mu0.is_nonnegative() || !mu1.is_nonnegative() {
        return Err(Error::Precondition(
            "transport marginals must be nonnegative".into(),
        ));
    }
    let (m0, m1) = (mass(mu0), mass(mu1));
    if (m0 - m1).abs() > MASS_TOLERANCE * m0.abs().max(m1.abs()) {
        return Err(Error::Precondition(format!(
            "marginal masses differ: {m0} vs {m1}"
        )));
    }
    let a = add_background(mu0, config.rho).into_values();
    let b = add_background(mu1, config.rho).into_values();
    let method = stencil.resolve(config.method);
    let n = a.len();
    let iters = config.iterations;

    let mut us = Vec::with_capacity(iters + 1);
    let mut vs = Vec::with_capacity(iters + 1);
    let mut row_den = Vec::with_capacity(iters);
    let mut col_den = Vec::with_capacity(iters);
    us.push(vec![1.0; n]);
    vs.push(vec![1.0; n]);
    for it in 1..=iters {
        let kv = stencil.apply_kernel_with(vs.last().unwrap(), method);
        check_positive(&kv, "K v", it)?;
        let u: Vec<f64> = a.iter().zip(&kv).map(|(m, d)| m / d).collect();
        check_positive(&u, "u", it)?;
        let ku = stencil.apply_kernel_with(&u, method);
        check_positive(&ku, "Kᵀ u", it)?;
        let v: Vec<f64> = b.iter().zip(&ku).map(|(m, d)| m / d).collect();
        check_positive(&v, "v", it)?;
        us.push(u);
        vs.push(v);
        row_den.push(kv);
        col_den.push(ku);
    }

    let (u, v) = (us.last().unwrap(), vs.last().unwrap());
    let kcv = stencil.apply_kernel_cost_with(v, method);
    let value: f64 = u.iter().zip(&kcv).map(|(x, y)| x * y).sum();
    if !value.is_finite() {
        return Err(Error::breakdown(
            "Sinkhorn value",
            format!("non-finite transport cost {value}"),
        ));
    }
    let kv = stencil.apply_kernel_with(v, method);
    let row_gap = u
        .iter()
        .zip(&kv)
        .zip(&a)
        .map(|((x, y), m)| (x * y - m).abs())
        .fold(0.0, f64::max);
    let ku = col_den.last().unwrap();
    let col_gap = v
        .iter()
        .zip(ku)
        .zip(&b)
        .map(|((x, y), m)| (x * y - m).abs())
        .fold(0.0, f64::max);

    Ok(SinkhornRun {
        u: us,
        v: vs,
        value,
        marginal_residual: row_gap.max(col_gap),
        row_denominators: row_den,
        col_denominators: col_den,
        mu0: a,
        mu1: b,
        rho: config.rho,
        method,
    })
}

/// Gradient of `run.value` with respect to both input marginals, by reverse
/// accumulation through the recorded recurrences and the background floor.
pub fn sinkhorn_grad(
    run: &SinkhornRun,
    stencil: &KernelStencil,
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let iters = run.iterations();
    let n = run.mu0.len();
    if iters == 0
        || run.u.len() != iters + 1
        || run.row_denominators.len() != iters
        || run.col_denominators.len() != iters
    {
        return Err(Error::Contract(
            "Sinkhorn run does not carry its trajectories".into(),
        ));
    }
    if mu0.values().len() != n || mu1.values().len() != n || stencil.grid().len() != n {
        return Err(Error::Contract(
            "marginals do not match the recorded run".into(),
        ));
    }
    let method = run.method;

    let mut g0 = vec![0.0; n];
    let mut g1 = vec![0.0; n];
    // value = u_N · (KC v_N), KC symmetric
    let mut u_bar = stencil.apply_kernel_cost_with(&run.v[iters], method);
    let mut v_bar = stencil.apply_kernel_cost_with(&run.u[iters], method);

    for i in (1..=iters).rev() {
        // v_i = mu1 / b_i, b_i = K u_i
        let b = &run.col_denominators[i - 1];
        let v = &run.v[i];
        let mut b_bar = vec![0.0; n];
        for k in 0..n {
            g1[k] += v_bar[k] / b[k];
            b_bar[k] = -v_bar[k] * v[k] / b[k];
        }
        let back = stencil.apply_kernel_with(&b_bar, method);
        for k in 0..n {
            u_bar[k] += back[k];
        }
        // u_i = mu0 / a_i, a_i = K v_{i-1}
        let a = &run.row_denominators[i - 1];
        let u = &run.u[i];
        let mut a_bar = vec![0.0; n];
        for k in 0..n {
            g0[k] += u_bar[k] / a[k];
            a_bar[k] = -u_bar[k] * u[k] / a[k];
        }
        if i > 1 {
            v_bar = stencil.apply_kernel_with(&a_bar, method);
            u_bar = vec![0.0; n];
        }
    }

    // background: mu' = mu + (rho / n) * sum(mu)
    if run.rho > 0.0 {
        for g in [&mut g0, &mut g1] {
            let shift = run.rho / n as f64 * g.iter().sum::<f64>();
            g.iter_mut().for_each(|x| *x += shift);
        }
    }
    Ok((g0, g1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PixelGrid;
    use crate::rng::SeededRng;
    use crate::transport::cost::TransportCost;
    use crate::transport::stencil::build_stencil;

    fn random_measure(grid: PixelGrid, rng: &mut SeededRng, target: f64) -> DiscreteMeasure {
        let v: Vec<f64> = (0..grid.len()).map(|_| 0.1 + rng.next_f64()).collect();
        let s: f64 = v.iter().sum();
        DiscreteMeasure::new(grid, v.iter().map(|x| x * target / s).collect()).unwrap()
    }

    #[test]
    fn single_atom_has_zero_value() {
        let g = PixelGrid::square(1).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 0.1).unwrap();
        let m = DiscreteMeasure::atom(g, 0, 0, 1.0);
        let cfg = EntropicOTConfig::new(0.1, 7, 0.0).unwrap();
        let run = sinkhorn(&m, &m, &st, &cfg).unwrap();
        assert_eq!(run.value, 0.0);
        assert_eq!(run.u.len(), 8);
        let (g0, g1) = sinkhorn_grad(&run, &st, &m, &m).unwrap();
        assert_eq!(g0, vec![0.0]);
        assert_eq!(g1, vec![0.0]);
    }

    #[test]
    fn point_to_point_cost() {
        let g = PixelGrid::new(4, 1, 1.0).unwrap();
        let a = DiscreteMeasure::atom(g, 0, 0, 1.0);
        let b = DiscreteMeasure::atom(g, 3, 0, 1.0);
        // At ε = 1e-3 the entry K(3) = exp(-9000) underflows and the plan cannot leave
        // the diagonal; the run must report that instead of returning a wrong value.
        let st = build_stencil(g, TransportCost::squared_distance(), 1e-3).unwrap();
        assert!(st.underflow_warning());
        let cfg = EntropicOTConfig::new(1e-3, 2000, 1e-6).unwrap();
        assert!(sinkhorn(&a, &b, &st, &cfg).is_err());
        // Smallest ε for which the three-pixel move is representable.
        let st = build_stencil(g, TransportCost::squared_distance(), 0.02).unwrap();
        let cfg = EntropicOTConfig::new(0.02, 2000, 1e-6).unwrap();
        let run = sinkhorn(&a, &b, &st, &cfg).unwrap();
        assert!((run.value - 9.0).abs() < 1e-3, "value {}", run.value);
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        let g = PixelGrid::square(2).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 1.0).unwrap();
        let a = DiscreteMeasure::new(g, vec![1.0; 4]).unwrap();
        let b = DiscreteMeasure::new(g, vec![1.1; 4]).unwrap();
        let cfg = EntropicOTConfig::new(1.0, 3, 0.0).unwrap();
        assert!(matches!(
            sinkhorn(&a, &b, &st, &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn zero_marginal_entry_breaks_down_without_floor() {
        let g = PixelGrid::square(2).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 1.0).unwrap();
        let a = DiscreteMeasure::new(g, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = DiscreteMeasure::new(g, vec![0.25; 4]).unwrap();
        let cfg = EntropicOTConfig::new(1.0, 3, 0.0).unwrap();
        match sinkhorn(&a, &b, &st, &cfg) {
            Err(Error::NumericalBreakdown { location, .. }) => {
                assert!(location.contains("iteration 1"))
            }
            other => panic!("expected breakdown, got {other:?}"),
        }
        let cfg = EntropicOTConfig::new(1.0, 3, 1e-6).unwrap();
        assert!(sinkhorn(&a, &b, &st, &cfg).is_ok());
    }

    #[test]
    fn marginals_snap_after_each_update() {
        let g = PixelGrid::square(4).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 0.5).unwrap();
        let mut rng = SeededRng::new(3, 0);
        let a = random_measure(g, &mut rng, 1.0);
        let b = random_measure(g, &mut rng, 1.0);
        let cfg = EntropicOTConfig::new(0.5, 6, 0.0).unwrap();
        let run = sinkhorn(&a, &b, &st, &cfg).unwrap();
        for i in 1..=6 {
            // rows of diag(u_i) K diag(v_{i-1})
            let kv = st.apply_kernel_with(&run.v[i - 1], KernelMethod::Direct);
            for k in 0..g.len() {
                let row = run.u[i][k] * kv[k];
                assert!((row - a.values()[k]).abs() <= 1e-12 * a.values()[k]);
            }
            let ku = st.apply_kernel_with(&run.u[i], KernelMethod::Direct);
            for k in 0..g.len() {
                let col = run.v[i][k] * ku[k];
                assert!((col - b.values()[k]).abs() <= 1e-12 * b.values()[k]);
            }
        }
    }

    #[test]
    fn converged_value_is_symmetric() {
        let g = PixelGrid::square(4).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 1.0).unwrap();
        let mut rng = SeededRng::new(8, 0);
        let a = random_measure(g, &mut rng, 1.0);
        let b = random_measure(g, &mut rng, 1.0);
        let cfg = EntropicOTConfig::new(1.0, 2000, 0.0).unwrap();
        let ab = sinkhorn(&a, &b, &st, &cfg).unwrap();
        let ba = sinkhorn(&b, &a, &st, &cfg).unwrap();
        assert!(ab.marginal_residual < 1e-14);
        assert!((ab.value - ba.value).abs() <= 1e-10 * ab.value);
    }

    #[test]
    fn spectral_and_direct_runs_agree_at_moderate_epsilon() {
        let g = PixelGrid::square(8).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 2.0).unwrap();
        let mut rng = SeededRng::new(9, 0);
        let a = random_measure(g, &mut rng, 3.0);
        let b = random_measure(g, &mut rng, 3.0);
        let base = EntropicOTConfig::new(2.0, 50, 0.0).unwrap();
        let d = sinkhorn(&a, &b, &st, &base.with_method(KernelMethod::Direct)).unwrap();
        let s = sinkhorn(&a, &b, &st, &base.with_method(KernelMethod::Spectral)).unwrap();
        assert!((d.value - s.value).abs() <= 1e-10 * d.value);
    }

    #[test]
    fn gradient_requires_trajectories() {
        let g = PixelGrid::square(2).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 1.0).unwrap();
        let a = DiscreteMeasure::new(g, vec![0.25; 4]).unwrap();
        let cfg = EntropicOTConfig::new(1.0, 3, 0.0).unwrap();
        let mut run = sinkhorn(&a, &a, &st, &cfg).unwrap();
        run.row_denominators.clear();
        assert!(matches!(
            sinkhorn_grad(&run, &st, &a, &a),
            Err(Error::Contract(_))
        ));
    }

    fn value_of(a: &[f64], b: &[f64], g: PixelGrid, st: &KernelStencil, cfg: &EntropicOTConfig) -> f64 {
        let a = DiscreteMeasure::new(g, a.to_vec()).unwrap();
        let b = DiscreteMeasure::new(g, b.to_vec()).unwrap();
        sinkhorn(&a, &b, st, cfg).unwrap().value
    }

    #[test]
    fn gradient_matches_central_differences() {
        let g = PixelGrid::square(4).unwrap();
        let st = build_stencil(g, TransportCost::squared_distance(), 0.1).unwrap();
        for seed in 0..20 {
            let mut rng = SeededRng::new(100 + seed, 0);
            let a = random_measure(g, &mut rng, 1.0);
            let b = random_measure(g, &mut rng, 1.0);
            let cfg = EntropicOTConfig::new(0.1, 10, 1e-6).unwrap();
            let run = sinkhorn(&a, &b, &st, &cfg).unwrap();
            let (g0, g1) = sinkhorn_grad(&run, &st, &a, &b).unwrap();
            // Mass must stay balanced, so perturb both marginals at the same pixel
            // pair and compare against the matching combination of partials.
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for p in 0..g.len() {
                let q = (p * 7 + 3) % g.len();
                let mut ap = a.values().to_vec();
                let mut am = ap.clone();
                let mut bp = b.values().to_vec();
                let mut bm = bp.clone();
                ap[p] += h;
                am[p] -= h;
                bp[q] += h;
                bm[q] -= h;
                let fd = (value_of(&ap, &bp, g, &st, &cfg) - value_of(&am, &bm, g, &st, &cfg))
                    / (2.0 * h);
                let an = g0[p] + g1[q];
                worst = worst.max((fd - an).abs());
                scale = scale.max(an.abs());
            }
            assert!(worst <= 1e-6 * scale, "seed {seed}: {worst} vs {scale}");
        }
    }
}
