//! Random-circle phantoms, per-circle misalignment and noisy sinograms.
//!
//! Circle geometry is in pixel units measured from the lower-left corner of the grid:
//! pixel `(i, j)` covers `[i, i+1] x [j, j+1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{DiscreteMeasure, PixelGrid};
use crate::rng::SeededRng;
use crate::tomography::{ParallelBeamGeometry, RayTransform, Sinogram};

const SUPERSAMPLE: usize = 4;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

impl Circle {
    pub fn translated(&self, shift: (f64, f64)) -> Circle {
        Circle {
            center: (self.center.0 + shift.0, self.center.1 + shift.1),
            ..*self
        }
    }

    fn inside(&self, grid: &PixelGrid) -> bool {
        let (x, y) = self.center;
        let r = self.radius;
        x - r >= 0.0
            && y - r >= 0.0
            && x + r <= grid.width() as f64
            && y + r <= grid.height() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: PixelGrid,
    /// Inclusive.
    pub count: (usize, usize),
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    pub margin: f64,
}

impl PhantomSpec {
    /// Desk defaults: 2 to 6 circles, radius 4 to 12 px scaled with the grid,
    /// intensity 0.5 to 1, margin `max radius + shift bound`.
    pub fn desk(grid: PixelGrid, shift_bound: f64) -> Self {
        let scale = grid.width().min(grid.height()) as f64 / 64.0;
        let radius = (4.0 * scale, 12.0 * scale);
        Self {
            grid,
            count: (2, 6),
            radius,
            intensity: (0.5, 1.0),
            margin: radius.1 + shift_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Precondition(format!("phantom spec: {what}")));
        if self.count.0 > self.count.1 {
            return bad("empty circle count range");
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad("radius range must be positive and nonempty");
        }
        let (a0, a1) = self.intensity;
        if !(a0 <= a1 && a0.is_finite() && a1.is_finite()) {
            return bad("empty intensity range");
        }
        if !(self.margin >= r1) {
            return bad("margin must be at least the largest radius");
        }
        let short = self.grid.width().min(self.grid.height()) as f64;
        if 2.0 * self.margin > short {
            return bad("margin leaves no room for circle centers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisalignmentSpec {
    pub bound: f64,
    pub per_circle: bool,
}

impl MisalignmentSpec {
    pub fn new(bound: f64, per_circle: bool) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::Precondition(format!(
                "shift bound must be nonnegative, got {bound}"
            )));
        }
        Ok(Self { bound, per_circle })
    }

    /// 5 px at 64 px, scaled with the grid.
    pub fn desk(grid: &PixelGrid) -> Self {
        Self {
            bound: 5.0 * grid.width().min(grid.height()) as f64 / 64.0,
            per_circle: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub level: f64,
}

impl NoiseSpec {
    pub fn new(level: f64) -> Result<Self> {
        if !(level >= 0.0 && level.is_finite()) {
            return Err(Error::Precondition(format!(
                "noise level must be nonnegative, got {level}"
            )));
        }
        Ok(Self { level })
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { level: 0.05 }
    }
}

/// Anti-aliased sum of circle indicators, coverage from `4 x 4` subsamples per pixel.
pub fn render_circles(grid: &PixelGrid, circles: &[Circle]) -> DiscreteMeasure {
    let mut values = vec![0.0; grid.len()];
    let sub = SUPERSAMPLE as f64;
    for c in circles {
        let (cx, cy) = c.center;
        let r2 = c.radius * c.radius;
        let i0 = ((cx - c.radius).floor().max(0.0)) as usize;
        let j0 = ((cy - c.radius).floor().max(0.0)) as usize;
        let i1 = ((cx + c.radius).ceil().max(0.0) as usize).min(grid.width());
        let j1 = ((cy + c.radius).ceil().max(0.0) as usize).min(grid.height());
        for j in j0..j1 {
            for i in i0..i1 {
                let mut hits = 0usize;
                for b in 0..SUPERSAMPLE {
                    let y = j as f64 + (b as f64 + 0.5) / sub - cy;
                    for a in 0..SUPERSAMPLE {
                        let x = i as f64 + (a as f64 + 0.5) / sub - cx;
                        if x * x + y * y <= r2 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    values[grid.index(i, j)] +=
                        c.intensity * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                }
            }
        }
    }
    DiscreteMeasure::new(*grid, values).expect("finite circle parameters")
}

fn uniform(rng: &mut SeededRng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

pub fn sample_phantom(spec: &PhantomSpec, rng: &mut SeededRng) -> Result<(DiscreteMeasure, Vec<Circle>)> {
    spec.validate()?;
    let count = rng.random_range(spec.count.0..=spec.count.1);
    let (w, h) = (spec.grid.width() as f64, spec.grid.height() as f64);
    let circles: Vec<Circle> = (0..count)
        .map(|_| {
            let radius = uniform(rng, spec.radius);
            let intensity = uniform(rng, spec.intensity);
            let x = uniform(rng, (spec.margin, w - spec.margin));
            let y = uniform(rng, (spec.margin, h - spec.margin));
            Circle {
                center: (x, y),
                radius,
                intensity,
            }
        })
        .collect();
    Ok((render_circles(&spec.grid, &circles), circles))
}

/// A re-rendered phantom with the translations actually applied.
#[derive(Debug, Clone)]
pub struct ShiftedPhantom {
    pub image: DiscreteMeasure,
    pub shifts: Vec<(f64, f64)>,
    /// Draws rejected because a circle would have left the domain.
    pub redraws: usize,
}

fn draw_shift(rng: &mut SeededRng, s: f64) -> (f64, f64) {
    if s == 0.0 {
        return (0.0, 0.0);
    }
    (rng.random_range(-s..=s), rng.random_range(-s..=s))
}

pub fn shift_phantom(
    circles: &[Circle],
    mis: &MisalignmentSpec,
    rng: &mut SeededRng,
    grid: &PixelGrid,
) -> Result<ShiftedPhantom> {
    if let Some(c) = circles.iter().find(|c| !c.inside(grid)) {
        return Err(Error::Precondition(format!(
            "circle at {:?} with radius {} does not fit the grid",
            c.center, c.radius
        )));
    }
    let mut redraws = 0;
    let mut next = |fits: &dyn Fn((f64, f64)) -> bool| -> Result<(f64, f64)> {
        loop {
            let d = draw_shift(rng, mis.bound);
            if fits(d) {
                return Ok(d);
            }
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Precondition(format!(
                    "no admissible shift after {MAX_REDRAWS} redraws; increase the margin"
                )));
            }
        }
    };
    let shifts = if mis.per_circle {
        circles
            .iter()
            .map(|c| next(&|d| c.translated(d).inside(grid)))
            .collect::<Result<Vec<_>>>()?
    } else if circles.is_empty() {
        Vec::new()
    } else {
        let d = next(&|d| circles.iter().all(|c| c.translated(d).inside(grid)))?;
        vec![d; circles.len()]
    };
    let moved: Vec<Circle> = circles
        .iter()
        .zip(&shifts)
        .map(|(c, &d)| c.translated(d))
        .collect();
    Ok(ShiftedPhantom {
        image: render_circles(grid, &moved),
        shifts,
        redraws,
    })
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    /// Unshifted phantom.
    pub truth: DiscreteMeasure,
    /// Noisy sinogram of the shifted phantom.
    pub data: Sinogram,
    pub circles: Vec<Circle>,
    pub shifts: Vec<(f64, f64)>,
    pub redraws: usize,
    /// Standard deviation of the added noise.
    pub noise_sigma: f64,
}

/// Draw a pair with a prebuilt operator. Draw order: phantom, shifts, noise.
pub fn make_pair_with(
    spec: &PhantomSpec,
    mis: &MisalignmentSpec,
    noise: &NoiseSpec,
    op: &RayTransform,
    rng: &mut SeededRng,
) -> Result<TrainingPair> {
    if op.grid() != &spec.grid {
        return Err(Error::Contract("operator grid does not match the phantom grid".into()));
    }
    let (truth, circles) = sample_phantom(spec, rng)?;
    let shifted = shift_phantom(&circles, mis, rng, &spec.grid)?;
    let mut data = op.forward(&shifted.image)?;
    let values = data.values_mut();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sigma = noise.level * mean;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::Precondition(format!("noise distribution: {e}")))?;
        for v in values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(TrainingPair {
        truth,
        data,
        circles,
        shifts: shifted.shifts,
        redraws: shifted.redraws,
        noise_sigma: sigma.max(0.0),
    })
}

pub fn make_pair(
    spec: &PhantomSpec,
    mis: &MisalignmentSpec,
    noise: &NoiseSpec,
    geom: &ParallelBeamGeometry,
    rng: &mut SeededRng,
) -> Result<TrainingPair> {
    let op = RayTransform::new(spec.grid, *geom);
    make_pair_with(spec, mis, noise, &op, rng)
}

/// Seeded dataset: pair `k` is drawn from stream `k` of `seed`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub misalignment: MisalignmentSpec,
    pub noise: NoiseSpec,
    op: RayTransform,
}

impl Dataset {
    pub fn new(
        seed: u64,
        phantom: PhantomSpec,
        misalignment: MisalignmentSpec,
        noise: NoiseSpec,
        geometry: ParallelBeamGeometry,
    ) -> Result<Self> {
        phantom.validate()?;
        let op = RayTransform::new(phantom.grid, geometry);
        Ok(Self {
            seed,
            phantom,
            misalignment,
            noise,
            op,
        })
    }

    pub fn operator(&self) -> &RayTransform {
        &self.op
    }

    pub fn pair(&self, k: u64) -> Result<TrainingPair> {
        let mut rng = SeededRng::new(self.seed, k);
        make_pair_with(&self.phantom, &self.misalignment, &self.noise, &self.op, &mut rng)
    }

    /// One CSV record: `index,seed,stream,circles,redraws,shifts` with shifts as
    /// `dx:dy` pairs joined by `;`.
    pub fn manifest_line(&self, k: u64, pair: &TrainingPair) -> String {
        let shifts: Vec<String> = pair
            .shifts
            .iter()
            .map(|(dx, dy)| format!("{dx:.6}:{dy:.6}"))
            .collect();
        format!(
            "{k},{},{k},{},{},{}",
            self.seed,
            pair.circles.len(),
            pair.redraws,
            shifts.join(";")
        )
    }
}

pub const MANIFEST_HEADER: &str = "index,seed,stream,circles,redraws,shifts";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::mass;

    fn grid64() -> PixelGrid {
        PixelGrid::square(64).unwrap()
    }

    fn centroid(m: &DiscreteMeasure) -> (f64, f64) {
        let g = m.grid();
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for j in 0..g.height() {
            for i in 0..g.width() {
                let v = m.values()[g.index(i, j)];
                sx += v * (i as f64 + 0.5);
                sy += v * (j as f64 + 0.5);
                s += v;
            }
        }
        (sx / s, sy / s)
    }

    #[test]
    fn no_circles_means_zero_image() {
        let mut spec = PhantomSpec::desk(grid64(), 5.0);
        spec.count = (0, 0);
        let (img, circles) = sample_phantom(&spec, &mut SeededRng::new(1, 0)).unwrap();
        assert!(circles.is_empty());
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disk_mass_matches_area() {
        for (r, a) in [(4.0, 0.5), (7.3, 1.0), (12.0, 0.8)] {
            let c = Circle {
                center: (31.7, 30.2),
                radius: r,
                intensity: a,
            };
            let m = mass(&render_circles(&grid64(), &[c]));
            let want = a * std::f64::consts::PI * r * r;
            assert!((m - want).abs() <= 0.02 * want, "r={r}: {m} vs {want}");
        }
    }

    #[test]
    fn phantoms_are_deterministic() {
        let spec = PhantomSpec::desk(grid64(), 5.0);
        let (a, ca) = sample_phantom(&spec, &mut SeededRng::new(9, 4)).unwrap();
        let (b, cb) = sample_phantom(&spec, &mut SeededRng::new(9, 4)).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let spec = PhantomSpec::desk(grid64(), 5.0);
        let mut rng = SeededRng::new(2, 0);
        for _ in 0..200 {
            let (_, circles) = sample_phantom(&spec, &mut rng).unwrap();
            assert!((2..=6).contains(&circles.len()));
            for c in &circles {
                assert!((4.0..=12.0).contains(&c.radius));
                assert!((0.5..=1.0).contains(&c.intensity));
                assert!(c.center.0 >= 17.0 && c.center.0 <= 47.0);
            }
        }
    }

    #[test]
    fn zero_shift_is_identity() {
        let spec = PhantomSpec::desk(grid64(), 5.0);
        let mut rng = SeededRng::new(3, 0);
        let (img, circles) = sample_phantom(&spec, &mut rng).unwrap();
        let mis = MisalignmentSpec::new(0.0, true).unwrap();
        let shifted = shift_phantom(&circles, &mis, &mut rng, &grid64()).unwrap();
        assert_eq!(shifted.image, img);
        assert_eq!(shifted.redraws, 0);
    }

    #[test]
    fn forced_shift_moves_centroid() {
        let c = Circle {
            center: (30.3, 33.1),
            radius: 6.5,
            intensity: 0.9,
        };
        let a = render_circles(&grid64(), &[c]);
        let b = render_circles(&grid64(), &[c.translated((3.0, -2.0))]);
        let (ca, cb) = (centroid(&a), centroid(&b));
        assert!((cb.0 - ca.0 - 3.0).abs() <= 0.1);
        assert!((cb.1 - ca.1 + 2.0).abs() <= 0.1);
        assert!((mass(&a) - mass(&b)).abs() <= 1e-3 * mass(&a));
    }

    #[test]
    fn random_shifts_keep_mass_at_coverage_accuracy() {
        let spec = PhantomSpec::desk(grid64(), 5.0);
        let mis = MisalignmentSpec::desk(&grid64());
        let mut rng = SeededRng::new(5, 0);
        for _ in 0..20 {
            let (img, circles) = sample_phantom(&spec, &mut rng).unwrap();
            let s = shift_phantom(&circles, &mis, &mut rng, &grid64()).unwrap();
            let area: f64 = circles
                .iter()
                .map(|c| c.intensity * std::f64::consts::PI * c.radius * c.radius)
                .sum();
            // sub-pixel shifts move individual subsamples in or out of each disk
            assert!((mass(&img) - area).abs() <= 0.02 * area);
            assert!((mass(&s.image) - area).abs() <= 0.02 * area);
            assert_eq!(s.redraws, 0);
        }
    }

    #[test]
    fn out_of_domain_shifts_are_redrawn() {
        let c = Circle {
            center: (3.0, 32.0),
            radius: 2.0,
            intensity: 1.0,
        };
        let mis = MisalignmentSpec::new(4.0, true).unwrap();
        let mut rng = SeededRng::new(6, 0);
        let mut total = 0;
        for _ in 0..50 {
            let s = shift_phantom(&[c], &mis, &mut rng, &grid64()).unwrap();
            assert!(s.shifts[0].0 >= -1.0);
            total += s.redraws;
        }
        assert!(total > 0);
    }

    #[test]
    fn global_shift_is_shared() {
        let spec = PhantomSpec::desk(grid64(), 5.0);
        let mis = MisalignmentSpec::new(5.0, false).unwrap();
        let mut rng = SeededRng::new(7, 0);
        let (_, circles) = sample_phantom(&spec, &mut rng).unwrap();
        let s = shift_phantom(&circles, &mis, &mut rng, &grid64()).unwrap();
        assert!(s.shifts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn shift_marginals_are_uniform() {
        let grid = PixelGrid::square(200).unwrap();
        let c = Circle {
            center: (100.0, 100.0),
            radius: 1.0,
            intensity: 1.0,
        };
        let s = 5.0;
        let mis = MisalignmentSpec::new(s, true).unwrap();
        let mut rng = SeededRng::new(8, 0);
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let shifted = shift_phantom(&[c], &mis, &mut rng, &grid).unwrap();
            assert_eq!(shifted.redraws, 0);
            xs.push(shifted.shifts[0]);
        }
        for comp in 0..2 {
            let vals: Vec<f64> = xs.iter().map(|d| if comp == 0 { d.0 } else { d.1 }).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let tol = 3.0 * s / (3.0 * n as f64).sqrt() * 3f64.sqrt();
            assert!(mean.abs() <= tol, "mean {mean}");
            assert!((var - s * s / 3.0).abs() <= 0.05 * s * s / 3.0, "var {var}");
        }
    }

    #[test]
    fn noiseless_unshifted_pair_is_exact() {
        let spec = PhantomSpec::desk(grid64(), 0.0);
        let mis = MisalignmentSpec::new(0.0, true).unwrap();
        let geom = ParallelBeamGeometry::desk(&grid64());
        let op = RayTransform::new(grid64(), geom);
        let pair =
            make_pair_with(&spec, &mis, &NoiseSpec::new(0.0).unwrap(), &op, &mut SeededRng::new(1, 1))
                .unwrap();
        assert_eq!(pair.data, op.forward(&pair.truth).unwrap());
    }

    #[test]
    fn noise_level_is_relative_to_mean() {
        let grid = grid64();
        let spec = PhantomSpec::desk(grid, 5.0);
        let mis = MisalignmentSpec::desk(&grid);
        let geom = ParallelBeamGeometry::desk(&grid);
        let op = RayTransform::new(grid, geom);
        let mut resid = Vec::new();
        let mut want = Vec::new();
        for k in 0..5 {
            let pair = make_pair_with(&spec, &mis, &NoiseSpec::default(), &op, &mut SeededRng::new(4, k))
                .unwrap();
            let moved: Vec<Circle> = pair
                .circles
                .iter()
                .zip(&pair.shifts)
                .map(|(c, &d)| c.translated(d))
                .collect();
            let clean = op.forward(&render_circles(&grid, &moved)).unwrap();
            let mean = clean.values().iter().sum::<f64>() / clean.values().len() as f64;
            let r: Vec<f64> = pair.data.values().iter().zip(clean.values()).map(|(a, b)| a - b).collect();
            let sd = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
            assert!((sd - 0.05 * mean).abs() <= 0.03 * 0.05 * mean, "pair {k}: {sd} vs {}", 0.05 * mean);
            resid.extend(r);
            want.push(pair.noise_sigma);
        }
        assert!(resid.len() >= 10_000);
    }

    #[test]
    fn truth_is_unshifted_and_data_is_shifted() {
        let grid = grid64();
        let ds = Dataset::new(
            11,
            PhantomSpec::desk(grid, 5.0),
            MisalignmentSpec::desk(&grid),
            NoiseSpec::new(0.0).unwrap(),
            ParallelBeamGeometry::desk(&grid),
        )
        .unwrap();
        for k in 0..5 {
            let p = ds.pair(k).unwrap();
            assert_eq!(p.truth, render_circles(&grid, &p.circles));
            let moved: Vec<Circle> =
                p.circles.iter().zip(&p.shifts).map(|(c, &d)| c.translated(d)).collect();
            assert_eq!(p.data, ds.operator().forward(&render_circles(&grid, &moved)).unwrap());
        }
    }

    #[test]
    fn dataset_pairs_are_reproducible_and_distinct() {
        let grid = grid64();
        let ds = Dataset::new(
            3,
            PhantomSpec::desk(grid, 5.0),
            MisalignmentSpec::desk(&grid),
            NoiseSpec::default(),
            ParallelBeamGeometry::desk(&grid),
        )
        .unwrap();
        let (a, b, c) = (ds.pair(2).unwrap(), ds.pair(2).unwrap(), ds.pair(3).unwrap());
        assert_eq!(a.data, b.data);
        assert_ne!(a.shifts, c.shifts);
        let line = ds.manifest_line(2, &a);
        assert!(line.starts_with("2,3,2,"));
        assert_eq!(line.split(',').count(), MANIFEST_HEADER.split(',').count());
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = PhantomSpec::desk(grid64(), 5.0);
        spec.margin = 40.0;
        assert!(spec.validate().is_err());
        spec = PhantomSpec::desk(grid64(), 5.0);
        spec.count = (3, 2);
        assert!(spec.validate().is_err());
        assert!(MisalignmentSpec::new(-1.0, true).is_err());
        assert!(NoiseSpec::new(f64::NAN).is_err());
    }
}
