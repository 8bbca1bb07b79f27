//! PGM contact sheets.

use std::io::Write;
use std::path::Path;

use otrecon_core::io::{value_range, write_pgm_range};

use crate::error::CliResult;

const GAP: usize = 2;

/// One raster in grid row order (row 0 at the bottom).
#[derive(Debug, Clone)]
pub struct Panel {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Display range; `None` uses the panel's own min and max.
    pub range: Option<(f64, f64)>,
}

impl Panel {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "panel size");
        Self {
            width,
            height,
            values,
            range: None,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }
}

/// Panels side by side, bottom-aligned, each mapped to `[0, 1]`, with a black gap.
pub fn contact_sheet(panels: &[Panel]) -> (usize, usize, Vec<f64>) {
    let width = panels.iter().map(|p| p.width).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let height = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let mut out = vec![0.0; width * height];
    let mut x0 = 0;
    for p in panels {
        let (lo, hi) = p.range.unwrap_or_else(|| value_range(&p.values));
        let span = hi - lo;
        for j in 0..p.height {
            for i in 0..p.width {
                let v = p.values[j * p.width + i];
                let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
                out[j * width + x0 + i] = t.clamp(0.0, 1.0);
            }
        }
        x0 += p.width + GAP;
    }
    (width, height, out)
}

pub fn save_sheet(path: &Path, panels: &[Panel]) -> CliResult<()> {
    let (w, h, v) = contact_sheet(panels);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm_range(&mut f, w, h, &v, 0.0, 1.0)?;
    f.flush()?;
    Ok(())
}
