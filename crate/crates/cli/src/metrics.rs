//! Image metrics for comparing reconstructions with ground truth.
//!
//! Centroid and spread treat the positive part of an image as a density over pixel
//! centers. They are undefined (NaN) when that part has no mass.

use otrecon_core::{mass, DiscreteMeasure};

#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mass: f64,
    pub centroid: (f64, f64),
    /// Trace of the second central moment matrix.
    pub spread: f64,
}

pub fn moments(m: &DiscreteMeasure) -> Moments {
    let g = m.grid();
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for j in 0..g.height() {
        for i in 0..g.width() {
            let v = m.values()[g.index(i, j)].max(0.0);
            let (x, y) = g.center(i, j);
            w += v;
            sx += v * x;
            sy += v * y;
        }
    }
    let (cx, cy) = (sx / w, sy / w);
    let mut s = 0.0;
    for j in 0..g.height() {
        for i in 0..g.width() {
            let v = m.values()[g.index(i, j)].max(0.0);
            let (x, y) = g.center(i, j);
            s += v * ((x - cx).powi(2) + (y - cy).powi(2));
        }
    }
    Moments {
        mass: w,
        centroid: (cx, cy),
        spread: s / w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    /// `‖rec − truth‖² / n`
    pub l2: f64,
    /// `(mass(rec) − mass(truth)) / mass(truth)`
    pub mass_err: f64,
    /// Distance between the two centroids, in length units.
    pub centroid: f64,
    /// Spread of the reconstruction over spread of the truth.
    pub spread_ratio: f64,
}

pub fn compare(rec: &DiscreteMeasure, truth: &DiscreteMeasure) -> SampleMetrics {
    let n = truth.values().len() as f64;
    let l2 = rec
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let mt = mass(truth);
    let (r, t) = (moments(rec), moments(truth));
    SampleMetrics {
        l2,
        mass_err: (mass(rec) - mt) / mt,
        centroid: (r.centroid.0 - t.centroid.0).hypot(r.centroid.1 - t.centroid.1),
        spread_ratio: r.spread / t.spread,
    }
}

pub fn mean(rows: &[SampleMetrics]) -> SampleMetrics {
    let n = rows.len() as f64;
    let avg = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    SampleMetrics {
        l2: avg(|r| r.l2),
        mass_err: avg(|r| r.mass_err),
        centroid: avg(|r| r.centroid),
        spread_ratio: avg(|r| r.spread_ratio),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use otrecon_core::datagen::{render_circles, Circle};
    use otrecon_core::PixelGrid;

    fn disk(c: (f64, f64), r: f64) -> DiscreteMeasure {
        let g = PixelGrid::square(32).unwrap();
        render_circles(
            &g,
            &[Circle {
                center: c,
                radius: r,
                intensity: 1.0,
            }],
        )
    }

    #[test]
    fn truth_against_itself() {
        let f = disk((16.0, 16.0), 5.0);
        let m = compare(&f, &f);
        assert_eq!(m.l2, 0.0);
        assert_eq!(m.mass_err, 0.0);
        assert_eq!(m.centroid, 0.0);
        assert_eq!(m.spread_ratio, 1.0);
    }

    #[test]
    fn zero_reconstruction() {
        let f = disk((16.0, 16.0), 5.0);
        let z = DiscreteMeasure::zeros(*f.grid());
        let m = compare(&z, &f);
        let want = f.values().iter().map(|v| v * v).sum::<f64>() / 1024.0;
        assert!((m.l2 - want).abs() < 1e-15);
        assert_eq!(m.mass_err, -1.0);
        assert!(m.spread_ratio.is_nan());
    }

    #[test]
    fn disk_moments_match_closed_form() {
        // uniform disk: trace of the second moment is r²/2
        let m = moments(&disk((15.3, 17.1), 6.0));
        // supersampled coverage quantizes the boundary
        assert!((m.centroid.0 - 15.3).abs() < 0.05 && (m.centroid.1 - 17.1).abs() < 0.05);
        assert!((m.spread - 18.0).abs() < 0.2, "{}", m.spread);
        let wider = moments(&disk((16.0, 16.0), 9.0));
        assert!(wider.spread > m.spread);
    }

    #[test]
    fn translation_moves_centroid_only() {
        let a = disk((12.0, 12.0), 4.0);
        let b = disk((15.0, 16.0), 4.0);
        let m = compare(&b, &a);
        assert!((m.centroid - 5.0).abs() < 1e-9);
        assert!((m.spread_ratio - 1.0).abs() < 1e-12);
    }
}
