//! `OTPD` checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "OTPD"  u32 version (1)
//! u32 stages  u32 primal  u32 dual  u32 filters
//! u32 width   u32 height  f64 spacing
//! u32 angles  u32 detectors  f64 detector spacing
//! f64 operator norm
//! u64 parameter count, then that many f32 in canonical order
//! optional: "ADAM" u64 completed steps, u64 t, f32 m[count], f32 v[count]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::net::{NetConfig, PrimalDualNet};
use crate::error::{Error, Result};
use crate::grid::PixelGrid;
use crate::tomography::ParallelBeamGeometry;

const MAGIC: &[u8; 4] = b"OTPD";
const OPTIMIZER_TAG: &[u8; 4] = b"ADAM";
pub const VERSION: u32 = 1;

/// Optimizer state carried alongside the parameters for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    /// Training steps completed, so the next step draws pair `step`.
    pub step: u64,
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: PrimalDualNet<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn u32le(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(
    w: &mut impl Write,
    net: &PrimalDualNet<f32>,
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<()> {
    let c = net.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [c.stages, c.primal, c.dual, c.filters, c.grid.width(), c.grid.height()] {
        u32le(w, v)?;
    }
    w.write_all(&c.grid.spacing().to_le_bytes())?;
    u32le(w, c.geometry.angles())?;
    u32le(w, c.geometry.detectors())?;
    w.write_all(&c.geometry.detector_spacing().to_le_bytes())?;
    w.write_all(&net.op_norm().to_le_bytes())?;
    let n = net.params().len();
    w.write_all(&(n as u64).to_le_bytes())?;
    f32s(w, net.params())?;
    if let Some(o) = optimizer {
        if o.m.len() != n || o.v.len() != n {
            return Err(Error::Contract("optimizer moments do not match parameters".into()));
        }
        w.write_all(OPTIMIZER_TAG)?;
        w.write_all(&o.step.to_le_bytes())?;
        w.write_all(&o.t.to_le_bytes())?;
        f32s(w, &o.m)?;
        f32s(w, &o.v)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if rd.take(4)? != MAGIC {
        return Err(Error::Format("not an OTPD checkpoint".into()));
    }
    let version = rd.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let (stages, primal, dual, filters) = (rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?);
    let (width, height, spacing) = (rd.u32()?, rd.u32()?, rd.f64()?);
    let (angles, detectors, det_spacing) = (rd.u32()?, rd.u32()?, rd.f64()?);
    let op_norm = rd.f64()?;
    let bad = |e: Error| Error::Format(format!("bad checkpoint header: {e}"));
    let config = NetConfig {
        stages,
        primal,
        dual,
        filters,
        grid: PixelGrid::new(width, height, spacing).map_err(bad)?,
        geometry: ParallelBeamGeometry::new(angles, detectors, det_spacing).map_err(bad)?,
    };
    let n = rd.u64()? as usize;
    let params = rd.f32s(n)?;
    let optimizer = if rd.pos == bytes.len() {
        None
    } else {
        if rd.take(4)? != OPTIMIZER_TAG {
            return Err(Error::Format("unknown trailing checkpoint section".into()));
        }
        let step = rd.u64()?;
        let t = rd.u64()?;
        let m = rd.f32s(n)?;
        let v = rd.f32s(n)?;
        Some(OptimizerSnapshot { step, t, m, v })
    };
    if rd.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    let net = PrimalDualNet::from_parts(config, op_norm, params).map_err(|e| match e {
        Error::Contract(m) => Error::Format(m),
        other => other,
    })?;
    Ok(Checkpoint { net, optimizer })
}

pub fn save_checkpoint(
    path: &Path,
    net: &PrimalDualNet<f32>,
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, net, optimizer)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
