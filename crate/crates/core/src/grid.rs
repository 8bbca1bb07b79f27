//! Pixel grids and nonnegative measures on them.
//!
//! Layout is row-major everywhere: pixel (column `i`, row `j`) lives at index
//! `j * width + i`, and its center sits at `((i + 0.5) * spacing, (j + 0.5) * spacing)`
//! measured from the domain corner.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    spacing: f64,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Precondition(format!(
                "grid extents must be positive, got {width}x{height}"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Precondition(format!(
                "grid spacing must be positive and finite, got {spacing}"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing,
        })
    }

    /// Square grid with unit spacing.
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size, 1.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    /// Center of pixel (column `i`, row `j`) relative to the domain corner.
    #[inline]
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.spacing,
            (j as f64 + 0.5) * self.spacing,
        )
    }

    /// Physical extent `(width * spacing, height * spacing)`.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.spacing,
            self.height as f64 * self.spacing,
        )
    }
}

/// Values on a [`PixelGrid`]. Transport marginals must additionally be nonnegative;
/// that is checked where it matters, not here, since network outputs share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    grid: PixelGrid,
    values: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(grid: PixelGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Contract(format!(
                "measure needs {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.width(),
                grid.height(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "measure value at index {k} is not finite"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: PixelGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    /// Unit-free point mass of weight `value` at pixel `(i, j)`.
    pub fn atom(grid: PixelGrid, i: usize, j: usize, value: f64) -> Self {
        let mut m = Self::zeros(grid);
        m.values[grid.index(i, j)] = value;
        m
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Total mass `Σ values`.
pub fn mass(m: &DiscreteMeasure) -> f64 {
    m.values.iter().sum()
}

/// Rescale `m` so its mass equals `target`.
pub fn normalize_mass(m: &DiscreteMeasure, target: f64) -> Result<DiscreteMeasure> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Precondition(format!(
            "normalization target must be positive, got {target}"
        )));
    }
    let total = mass(m);
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a measure of mass {total}"
        )));
    }
    if total == target {
        return Ok(m.clone());
    }
    Ok(m.scaled(target / total))
}

/// Add `rho * mass(m) / n` to every pixel, a uniform floor proportional to the mass.
pub fn add_background(m: &DiscreteMeasure, rho: f64) -> DiscreteMeasure {
    assert!(rho >= 0.0, "background level must be nonnegative");
    let floor = rho * mass(m) / m.grid.len() as f64;
    if floor == 0.0 {
        return m.clone();
    }
    DiscreteMeasure {
        grid: m.grid,
        values: m.values.iter().map(|v| v + floor).collect(),
    }
}
