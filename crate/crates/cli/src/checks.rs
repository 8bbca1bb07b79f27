//! Seeded numerical verification suites shared by `selftest` and the acceptance run.

use std::sync::Arc;
use std::time::Instant;

use otrecon_core::datagen::{Dataset, MisalignmentSpec, NoiseSpec, PhantomSpec, TrainingPair};
use otrecon_core::diffnet::{
    loss_forward_backward, loss_value, LossSpec, NetConfig, PreparedLoss, PrimalDualNet, Shape,
    Tape, Var,
};
use otrecon_core::scalar::Scalar;
use otrecon_core::tomography::{ParallelBeamGeometry, RayTransform};
use otrecon_core::transport::{
    build_stencil, exact_transport, sinkhorn, sinkhorn_grad, EntropicOTConfig, KernelStencil,
    TransportCost,
};
use otrecon_core::{DiscreteMeasure, PixelGrid, SeededRng};

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const CHECK_HEADER: &str = "suite,instances,max_error,tolerance,status";

impl Check {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }

    pub fn status(&self) -> &'static str {
        if self.pass {
            "PASS"
        } else {
            "FAIL"
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.3e},{:.0e},{}",
            self.name,
            self.instances,
            self.max_error,
            self.tolerance,
            self.status()
        )
    }
}

fn uniform(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

fn positive_measure(grid: PixelGrid, rng: &mut SeededRng) -> DiscreteMeasure {
    let v = uniform(rng, grid.len(), 0.1, 1.1);
    let s: f64 = v.iter().sum();
    DiscreteMeasure::new(grid, v.iter().map(|x| x / s).collect()).expect("finite")
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / max_abs(b).max(f64::MIN_POSITIVE)
}

/// Dense `Kx` and `(K ⊙ C)x` assembled entry by entry from the stencil.
pub fn dense_products(st: &KernelStencil, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = *st.grid();
    let (w, h) = (g.width(), g.height());
    let mut k = vec![0.0; g.len()];
    let mut kc = vec![0.0; g.len()];
    for rj in 0..h {
        for ri in 0..w {
            let (mut a, mut b) = (0.0, 0.0);
            for qj in 0..h {
                for qi in 0..w {
                    let (dx, dy) = (ri as isize - qi as isize, rj as isize - qj as isize);
                    let kv = st.kernel_at(dx, dy);
                    let xv = x[qj * w + qi];
                    a += kv * xv;
                    b += kv * st.cost_at(dx, dy) * xv;
                }
            }
            k[rj * w + ri] = a;
            kc[rj * w + ri] = b;
        }
    }
    (k, kc)
}

/// Spectral kernel products against the dense oracle, both costs, each size.
pub fn fft_vs_dense(sizes: &[usize], seed: u64) -> CliResult<Check> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (s, &size) in sizes.iter().enumerate() {
        let g = PixelGrid::square(size)?;
        let stencils = [
            build_stencil(g, TransportCost::squared_distance(), 0.5)?,
            build_stencil(g, TransportCost::bounded_quartic(size as f64 / 4.0)?, 0.05)?,
        ];
        let mut rng = SeededRng::new(seed, s as u64);
        for st in &stencils {
            let x = uniform(&mut rng, g.len(), 0.0, 1.0);
            let (k, kc) = dense_products(st, &x);
            worst = worst.max(rel_inf(&st.apply_kernel(&x, false), &k));
            worst = worst.max(rel_inf(&st.apply_kernel(&x, true), &k));
            worst = worst.max(rel_inf(&st.apply_kernel_cost(&x), &kc));
            count += 1;
        }
    }
    Ok(Check::new("fft_vs_dense", count, worst, 1e-10))
}

/// Wall time of one spectral kernel application on a `size`² grid, stencil prebuilt.
pub fn spectral_seconds(size: usize) -> CliResult<f64> {
    let g = PixelGrid::square(size)?;
    let st = build_stencil(g, TransportCost::squared_distance(), 1.0)?;
    let x = vec![1.0; g.len()];
    let _ = st.apply_kernel(&x, false);
    let t = Instant::now();
    let y = st.apply_kernel(&x, false);
    let dt = t.elapsed().as_secs_f64();
    assert!(y.iter().all(|v| v.is_finite()));
    Ok(dt)
}

/// Sinkhorn at `ε = 10⁻³·max C` against the exact LP on random positive 6×6 pairs.
/// Reports the largest `|T_ε − T| / T`; passes when every instance satisfies
/// `|T_ε − T| ≤ 10⁻²·T + 10⁻⁶`.
pub fn sinkhorn_vs_exact(instances: usize, iterations: usize, seed: u64) -> CliResult<Check> {
    let g = PixelGrid::square(6)?;
    let cost = TransportCost::squared_distance();
    let probe = build_stencil(g, cost, 1.0)?;
    let eps = 1e-3 * probe.max_cost();
    let st = build_stencil(g, cost, eps)?;
    let cfg = EntropicOTConfig::new(eps, iterations, 0.0)?;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for k in 0..instances {
        let mut rng = SeededRng::new(seed, k as u64);
        let a = positive_measure(g, &mut rng);
        let b = positive_measure(g, &mut rng);
        let t = exact_transport(&a, &b, &cost)?;
        let te = sinkhorn(&a, &b, &st, &cfg)?.value;
        let d = (te - t).abs();
        ok &= d <= 1e-2 * t + 1e-6;
        worst = worst.max(d / t);
    }
    let mut c = Check::new("sinkhorn_vs_exact", instances, worst, 1e-2);
    c.pass = ok;
    Ok(c)
}

/// `sinkhorn_grad` against central differences, perturbing both marginals at a
/// pixel pair so masses stay balanced.
pub fn sinkhorn_gradient(instances: usize, seed: u64) -> CliResult<Check> {
    let g = PixelGrid::square(4)?;
    let st = build_stencil(g, TransportCost::squared_distance(), 0.1)?;
    let cfg = EntropicOTConfig::new(0.1, 10, 1e-6)?;
    let value = |a: &[f64], b: &[f64]| -> CliResult<f64> {
        let a = DiscreteMeasure::new(g, a.to_vec())?;
        let b = DiscreteMeasure::new(g, b.to_vec())?;
        Ok(sinkhorn(&a, &b, &st, &cfg)?.value)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = SeededRng::new(seed, k as u64);
        let a = positive_measure(g, &mut rng);
        let b = positive_measure(g, &mut rng);
        let run = sinkhorn(&a, &b, &st, &cfg)?;
        let (g0, g1) = sinkhorn_grad(&run, &st, &a, &b)?;
        let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
        for p in 0..g.len() {
            let q = (p * 7 + 3) % g.len();
            let (mut ap, mut am) = (a.values().to_vec(), a.values().to_vec());
            let (mut bp, mut bm) = (b.values().to_vec(), b.values().to_vec());
            ap[p] += h;
            am[p] -= h;
            bp[q] += h;
            bm[q] -= h;
            let fd = (value(&ap, &bp)? - value(&am, &bm)?) / (2.0 * h);
            let an = g0[p] + g1[q];
            err = err.max((fd - an).abs());
            scale = scale.max(an.abs());
        }
        worst = worst.max(err / scale);
    }
    Ok(Check::new("sinkhorn_grad", instances, worst, 1e-6))
}

/// Gradient of the mass-normalized transport loss with respect to the network
/// output, against central differences.
pub fn normalized_loss_gradient(instances: usize, seed: u64) -> CliResult<Check> {
    let g = PixelGrid::square(8)?;
    let prep = PreparedLoss::new(
        LossSpec {
            ot: EntropicOTConfig::new(0.05, 10, 1e-6)?,
            ..LossSpec::entropic(TransportCost::bounded_quartic(3.0)?)
        },
        g,
    )?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = SeededRng::new(seed, k as u64);
        let f = DiscreteMeasure::new(g, uniform(&mut rng, g.len(), 0.0, 1.0))?;
        // entries kept away from the rectification kink
        let out: Vec<f64> = uniform(&mut rng, g.len(), -0.4, 1.2)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { 0.3 } else { v })
            .collect();
        let l = prep.evaluate(&out, &f)?;
        let scale = max_abs(&l.grad);
        let mut err: f64 = 0.0;
        for p in 0..g.len() {
            let (mut op, mut om) = (out.clone(), out.clone());
            op[p] += h;
            om[p] -= h;
            let fd = (prep.evaluate(&op, &f)?.loss - prep.evaluate(&om, &f)?.loss) / (2.0 * h);
            err = err.max((fd - l.grad[p]).abs());
        }
        worst = worst.max(err / scale);
    }
    Ok(Check::new("normalized_ot_loss_grad", instances, worst, 1e-6))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Conv,
    Prelu,
    Residual,
    Operator,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Conv,
        Primitive::Prelu,
        Primitive::Residual,
        Primitive::Operator,
    ];

    fn name(self) -> &'static str {
        match self {
            Primitive::Conv => "conv3x3",
            Primitive::Prelu => "prelu",
            Primitive::Residual => "slice_add_concat",
            Primitive::Operator => "project_backproject",
        }
    }

    fn input(self) -> Shape {
        match self {
            Primitive::Conv => Shape::new(2, 8, 8),
            Primitive::Prelu | Primitive::Residual => Shape::new(3, 8, 8),
            Primitive::Operator => Shape::new(1, 8, 8),
        }
    }

    fn params(self) -> usize {
        match self {
            Primitive::Conv => 3 * 2 * 9 + 3,
            Primitive::Prelu => 3,
            Primitive::Residual => 2 * 64,
            Primitive::Operator => 64,
        }
    }

    fn build<T: Scalar>(self, t: &mut Tape<T>, p: &[T], x: Var, ray: &Arc<RayTransform>) -> Var {
        let r = match self {
            Primitive::Conv => {
                let w = t.param(p, 0, Shape::new(54, 1, 1));
                let b = t.param(p, 54, Shape::new(3, 1, 1));
                t.conv3x3(x, w, b)
            }
            Primitive::Prelu => {
                let a = t.param(p, 0, Shape::new(3, 1, 1));
                t.prelu(x, a)
            }
            Primitive::Residual => {
                let q = t.param(p, 0, Shape::new(2, 8, 8));
                t.slice(x, 1, 3)
                    .and_then(|s| t.add(s, q))
                    .and_then(|a| t.concat(&[a, x, a]))
            }
            Primitive::Operator => {
                let w = t.param(p, 0, Shape::new(1, 8, 8));
                t.add(x, w)
                    .and_then(|xw| t.project(xw, ray, 0.5))
                    .and_then(|y| t.backproject(y, ray, 2.0))
            }
        };
        r.expect("shapes are consistent by construction")
    }
}

/// `Σ weight·out` and its gradient wrt the input and the parameters.
fn primitive_eval<T: Scalar>(
    prim: Primitive,
    ray: &Arc<RayTransform>,
    x: &[f64],
    p: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let cast = |v: &[f64]| v.iter().map(|&a| T::lit(a)).collect::<Vec<T>>();
    let mut tape = Tape::<T>::new();
    let xv = tape.input(prim.input(), cast(x)).expect("input shape");
    let pp = cast(p);
    let out = prim.build(&mut tape, &pp, xv, ray);
    let weights: Vec<f64> = (0..tape.shape(out).len())
        .map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.4)
        .collect();
    let val = tape
        .values(out)
        .iter()
        .zip(&weights)
        .map(|(a, b)| a.as_f64() * b)
        .sum();
    let gp = tape.backward(out, &cast(&weights), p.len()).expect("backward");
    let gx = tape.tensor(xv).grad.iter().map(|v| v.as_f64()).collect();
    (val, gp.iter().map(|v| v.as_f64()).collect(), gx)
}

/// Analytic gradient of one primitive in precision `T` against f64 central
/// differences, over every input and parameter entry.
pub fn primitive_gradient<T: Scalar>(prim: Primitive, instances: usize, seed: u64) -> Check {
    let grid = PixelGrid::square(8).expect("valid grid");
    let ray = Arc::new(RayTransform::new(
        grid,
        ParallelBeamGeometry::new(5, 11, 1.0).expect("valid geometry"),
    ));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = SeededRng::new(seed, k as u64);
        let x = uniform(&mut rng, prim.input().len(), -1.0, 1.0);
        let p = uniform(&mut rng, prim.params(), -1.0, 1.0);
        let (_, gp, gx) = primitive_eval::<T>(prim, &ray, &x, &p);
        let f = |x: &[f64], p: &[f64]| primitive_eval::<f64>(prim, &ray, x, p).0;
        let scale = max_abs(&gp).max(max_abs(&gx));
        let mut err: f64 = 0.0;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            err = err.max(((f(&x, &a) - f(&x, &b)) / (2.0 * h) - gp[i]).abs());
        }
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            err = err.max(((f(&a, &p) - f(&b, &p)) / (2.0 * h) - gx[i]).abs());
        }
        worst = worst.max(err / scale);
    }
    let bits = std::mem::size_of::<T>() * 8;
    let tol = if bits == 64 { 1e-7 } else { 1e-4 };
    Check::new(&format!("{}_f{bits}", prim.name()), instances, worst, tol)
}

fn toy_net() -> NetConfig {
    NetConfig {
        stages: 2,
        primal: 3,
        dual: 3,
        filters: 6,
        grid: PixelGrid::square(16).expect("valid grid"),
        geometry: ParallelBeamGeometry::new(8, 23, 1.0).expect("valid geometry"),
    }
}

fn toy_pair(cfg: &NetConfig, seed: u64, k: u64) -> CliResult<TrainingPair> {
    Ok(Dataset::new(
        seed,
        PhantomSpec::desk(cfg.grid, 1.25),
        MisalignmentSpec::desk(&cfg.grid),
        NoiseSpec::default(),
        cfg.geometry,
    )?
    .pair(k)?)
}

/// End-to-end loss gradient of a 16×16 toy network: f32 backpropagation against
/// f64 central differences on `per_instance` sampled parameters.
pub fn end_to_end_gradient(
    ot: bool,
    instances: usize,
    per_instance: usize,
    seed: u64,
) -> CliResult<Check> {
    let cfg = toy_net();
    let spec = if ot {
        LossSpec::entropic(TransportCost::bounded_quartic(2.5)?)
    } else {
        LossSpec::mse()
    };
    let prep = PreparedLoss::new(spec, cfg.grid)?;
    let mut worst: f64 = 0.0;
    for k in 0..instances as u64 {
        let net32 = PrimalDualNet::<f32>::initialized(cfg, seed.wrapping_add(k))?;
        let net64: PrimalDualNet<f64> = net32.cast();
        let pair = toy_pair(&cfg, seed, k)?;
        let g = loss_forward_backward(&net32, &pair, &prep)?;
        let mut rng = SeededRng::new(seed, 1000 + k);
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..per_instance {
            let i = (rng.next_f64() * net64.params().len() as f64) as usize;
            let h = 1e-6 * net64.params()[i].abs().max(1e-2);
            let (mut p, mut m) = (net64.clone(), net64.clone());
            p.params_mut()[i] += h;
            m.params_mut()[i] -= h;
            let lp = loss_value(&p, &pair, &prep)?.loss;
            let lm = loss_value(&m, &pair, &prep)?.loss;
            num.push((lp - lm) / (2.0 * h));
            ana.push(g.grad[i] as f64);
        }
        worst = worst.max(rel_inf(&ana, &num));
    }
    let name = if ot { "end_to_end_ot_f32" } else { "end_to_end_l2_f32" };
    Ok(Check::new(name, instances, worst, 1e-3))
}

/// `|⟨Af, g⟩ − ⟨f, Aᵀg⟩| / (‖Af‖·‖g‖)` over seeded pairs.
pub fn adjoint(geometry: ParallelBeamGeometry, grid: PixelGrid, instances: usize, seed: u64) -> Check {
    let op = RayTransform::new(grid, geometry);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = SeededRng::new(seed, k as u64);
        let f = uniform(&mut rng, grid.len(), -1.0, 1.0);
        let g = uniform(&mut rng, geometry.len(), -1.0, 1.0);
        let mut af = vec![0.0; geometry.len()];
        let mut atg = vec![0.0; grid.len()];
        op.forward_into(&f, &mut af);
        op.adjoint_into(&g, &mut atg);
        let lhs: f64 = af.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.iter().zip(&atg).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max((lhs - rhs).abs() / (norm(&af) * norm(&g)));
    }
    Check::new("adjoint", instances, worst, 1e-12)
}

/// The desk geometry: 64×64 pixels, 30 angles, 91 detectors.
pub fn desk_adjoint(instances: usize, seed: u64) -> Check {
    let grid = PixelGrid::square(64).expect("valid grid");
    adjoint(ParallelBeamGeometry::desk(&grid), grid, instances, seed)
}

/// Every gradient suite at `instances` seeds each.
pub fn gradient_suite(instances: usize, seed: u64) -> CliResult<Vec<Check>> {
    let mut out = vec![
        sinkhorn_gradient(instances, seed)?,
        normalized_loss_gradient(instances, seed)?,
    ];
    for p in Primitive::ALL {
        out.push(primitive_gradient::<f64>(p, instances, seed));
        out.push(primitive_gradient::<f32>(p, instances, seed));
    }
    out.push(end_to_end_gradient(false, instances, 32, seed)?);
    out.push(end_to_end_gradient(true, instances, 20, seed)?);
    Ok(out)
}
