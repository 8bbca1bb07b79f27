//! Learned primal-dual reconstruction network.

use std::sync::Arc;

use rand::Rng;

use super::tape::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{DiscreteMeasure, PixelGrid};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tomography::{ParallelBeamGeometry, RayTransform, Sinogram};

/// Stream reserved for weight initialization.
pub const INIT_STREAM: u64 = 1 << 63;
const NORM_ITERATIONS: usize = 100;

/// Offsets of one conv layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
    /// `None` on the last layer of a block.
    pub slope: Option<usize>,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        self.outputs * self.inputs * 9
    }
}

/// Three 3x3 conv layers `inputs → filters → filters → iterate`, PReLU after the first
/// two, added onto the first `iterate` input channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockParams {
    pub layers: [ConvLayer; 3],
    pub iterate: usize,
}

impl ConvBlockParams {
    /// Lay the block out starting at `offset`: per layer weight, bias, then slope.
    pub fn new(inputs: usize, filters: usize, iterate: usize, offset: usize) -> Self {
        let mut at = offset;
        let mut layer = |i: usize, o: usize, nonlinear: bool| {
            let weight = at;
            at += o * i * 9;
            let bias = at;
            at += o;
            let slope = nonlinear.then(|| {
                at += o;
                at - o
            });
            ConvLayer {
                inputs: i,
                outputs: o,
                weight,
                bias,
                slope,
            }
        };
        let layers = [
            layer(inputs, filters, true),
            layer(filters, filters, true),
            layer(filters, iterate, false),
        ];
        Self { layers, iterate }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn offset(&self) -> usize {
        self.layers[0].weight
    }

    pub fn end(&self) -> usize {
        let last = &self.layers[2];
        last.bias + last.outputs
    }

    pub fn len(&self) -> usize {
        self.end() - self.offset()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Xavier-uniform weights, zero biases, constant slopes.
    pub fn initialize<T: Scalar>(&self, params: &mut [T], slope: f64, rng: &mut SeededRng) {
        for l in &self.layers {
            let bound = (6.0 / ((l.inputs + l.outputs) * 9) as f64).sqrt();
            for p in &mut params[l.weight..l.weight + l.weight_len()] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
            params[l.bias..l.bias + l.outputs].fill(T::zero());
            if let Some(s) = l.slope {
                params[s..s + l.outputs].fill(T::lit(slope));
            }
        }
    }
}

/// Residual block on the tape: `input[..iterate] + block(input)`.
pub fn conv_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &ConvBlockParams,
    params: &[T],
    input: Var,
) -> Result<Var> {
    let s = tape.shape(input);
    if s.channels != block.inputs() {
        return Err(Error::Contract(format!(
            "block expects {} input channels, got {}",
            block.inputs(),
            s.channels
        )));
    }
    if params.len() < block.end() {
        return Err(Error::Contract("parameter vector too short for block".into()));
    }
    let mut x = input;
    for l in &block.layers {
        let w = tape.param(params, l.weight, Shape::new(l.weight_len(), 1, 1));
        let b = tape.param(params, l.bias, Shape::new(l.outputs, 1, 1));
        x = tape.conv3x3(x, w, b)?;
        if let Some(off) = l.slope {
            let a = tape.param(params, off, Shape::new(l.outputs, 1, 1));
            x = tape.prelu(x, a)?;
        }
    }
    let iterate = tape.slice(input, 0, block.iterate)?;
    tape.add(iterate, x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub stages: usize,
    pub primal: usize,
    pub dual: usize,
    pub filters: usize,
    pub grid: PixelGrid,
    pub geometry: ParallelBeamGeometry,
}

impl NetConfig {
    /// 5 stages, 5 primal and dual channels, 16 filters.
    pub fn desk(grid: PixelGrid, geometry: ParallelBeamGeometry) -> Self {
        Self {
            stages: 5,
            primal: 5,
            dual: 5,
            filters: 16,
            grid,
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.filters == 0 {
            return Err(Error::Precondition("network needs stages and filters".into()));
        }
        if self.primal < 2 || self.dual < 1 {
            return Err(Error::Precondition(
                "need at least 2 primal and 1 dual channels".into(),
            ));
        }
        Ok(())
    }
}

/// `I` stages of dual then primal residual blocks linked by the scaled ray transform.
///
/// The operator and its adjoint are used as `𝒜/‖𝒜‖` and `𝒜ᵀ/‖𝒜‖`, and the data is
/// divided by `‖𝒜‖` on entry, so the blocks see unit-scale inputs.
#[derive(Debug, Clone)]
pub struct PrimalDualNet<T> {
    config: NetConfig,
    dual_blocks: Vec<ConvBlockParams>,
    primal_blocks: Vec<ConvBlockParams>,
    params: Vec<T>,
    ray: Arc<RayTransform>,
    op_norm: f64,
}

/// Recorded forward pass: the tape and the output node.
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub output: Var,
}

impl<T: Scalar> PrimalDualNet<T> {
    /// All-zero parameters.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        let ray = Arc::new(RayTransform::new(config.grid, config.geometry));
        let op_norm = ray.norm_estimate(NORM_ITERATIONS);
        Self::assemble(config, ray, op_norm)
    }

    fn assemble(config: NetConfig, ray: Arc<RayTransform>, op_norm: f64) -> Result<Self> {
        config.validate()?;
        if !(op_norm > 0.0 && op_norm.is_finite()) {
            return Err(Error::Degenerate(format!("operator norm {op_norm}")));
        }
        let mut at = 0;
        let mut dual_blocks = Vec::with_capacity(config.stages);
        let mut primal_blocks = Vec::with_capacity(config.stages);
        for _ in 0..config.stages {
            let d = ConvBlockParams::new(config.dual + 2, config.filters, config.dual, at);
            at = d.end();
            let p = ConvBlockParams::new(config.primal + 1, config.filters, config.primal, at);
            at = p.end();
            dual_blocks.push(d);
            primal_blocks.push(p);
        }
        Ok(Self {
            config,
            dual_blocks,
            primal_blocks,
            params: vec![T::zero(); at],
            ray,
            op_norm,
        })
    }

    /// Xavier weights from the initialization stream of `seed`, PReLU slopes 0.25.
    pub fn initialized(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = SeededRng::new(seed, INIT_STREAM);
        let mut params = std::mem::take(&mut net.params);
        for (d, p) in net.dual_blocks.iter().zip(&net.primal_blocks) {
            d.initialize(&mut params, 0.25, &mut rng);
            p.initialize(&mut params, 0.25, &mut rng);
        }
        net.params = params;
        Ok(net)
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> PrimalDualNet<U> {
        PrimalDualNet {
            config: self.config,
            dual_blocks: self.dual_blocks.clone(),
            primal_blocks: self.primal_blocks.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            ray: Arc::clone(&self.ray),
            op_norm: self.op_norm,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn ray(&self) -> &Arc<RayTransform> {
        &self.ray
    }

    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    pub fn dual_blocks(&self) -> &[ConvBlockParams] {
        &self.dual_blocks
    }

    pub fn primal_blocks(&self) -> &[ConvBlockParams] {
        &self.primal_blocks
    }

    /// Flat parameters in canonical order: for each stage, the dual block then the
    /// primal block, each layer as weight `(out, in, 3, 3)`, bias, PReLU slope.
    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Run all stages from zero initial iterates, recording every operation.
    pub fn forward(&self, g: &Sinogram) -> Result<Forward<T>> {
        let geom = &self.config.geometry;
        if g.geometry() != geom {
            return Err(Error::Contract(
                "sinogram geometry does not match the network".into(),
            ));
        }
        let grid = &self.config.grid;
        let scale = 1.0 / self.op_norm;
        let mut tape = Tape::new();
        let (a, d) = (geom.angles(), geom.detectors());
        let (h, w) = (grid.height(), grid.width());
        let data = tape.input(
            Shape::new(1, a, d),
            g.values().iter().map(|v| T::lit(v * scale)).collect(),
        )?;
        let mut f = tape.input(
            Shape::new(self.config.primal, h, w),
            vec![T::zero(); self.config.primal * h * w],
        )?;
        let mut hd = tape.input(
            Shape::new(self.config.dual, a, d),
            vec![T::zero(); self.config.dual * a * d],
        )?;
        for (stage, (db, pb)) in self.dual_blocks.iter().zip(&self.primal_blocks).enumerate() {
            let f2 = tape.slice(f, 1, 2)?;
            let af2 = tape.project(f2, &self.ray, scale)?;
            let dual_in = tape.concat(&[hd, af2, data])?;
            hd = conv_block_forward(&mut tape, db, &self.params, dual_in)?;
            let h1 = tape.slice(hd, 0, 1)?;
            let ath = tape.backproject(h1, &self.ray, scale)?;
            let primal_in = tape.concat(&[f, ath])?;
            f = conv_block_forward(&mut tape, pb, &self.params, primal_in)?;
            for (what, v) in [("dual", hd), ("primal", f)] {
                if let Some(k) = tape.values(v).iter().position(|x| !x.is_finite()) {
                    return Err(Error::breakdown(
                        format!("primal-dual stage {stage}"),
                        format!("{what} iterate entry {k} is not finite"),
                    ));
                }
            }
        }
        let output = tape.slice(f, 0, 1)?;
        Ok(Forward { tape, output })
    }

    /// Reconstruction `f_I^{(1)}` as an f64 image.
    pub fn reconstruct(&self, g: &Sinogram) -> Result<DiscreteMeasure> {
        let fw = self.forward(g)?;
        DiscreteMeasure::new(
            self.config.grid,
            fw.tape.values(fw.output).iter().map(|v| v.as_f64()).collect(),
        )
    }

    pub(crate) fn from_parts(config: NetConfig, op_norm: f64, params: Vec<T>) -> Result<Self> {
        let ray = Arc::new(RayTransform::new(config.grid, config.geometry));
        let mut net = Self::assemble(config, ray, op_norm)?;
        net.set_params(params)?;
        Ok(net)
    }
}
