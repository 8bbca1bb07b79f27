//! Training losses and their gradients with respect to network parameters.

use std::sync::Arc;

use super::net::PrimalDualNet;
use crate::datagen::TrainingPair;
use crate::error::{Error, Result};
use crate::grid::{mass, DiscreteMeasure, PixelGrid};
use crate::scalar::Scalar;
use crate::transport::{
    build_stencil, sinkhorn, sinkhorn_grad, EntropicOTConfig, KernelStencil, TransportCost,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    MeanSquaredError,
    EntropicWasserstein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub cost: TransportCost,
    pub ot: EntropicOTConfig,
    pub mass_weight: f64,
}

impl LossSpec {
    pub fn mse() -> Self {
        Self {
            kind: LossKind::MeanSquaredError,
            ..Self::entropic(TransportCost::bounded_quartic(10.0).expect("positive sigma"))
        }
    }

    /// `ε = 10⁻³`, 10 iterations, background floor `10⁻⁶`, mass weight 1.
    pub fn entropic(cost: TransportCost) -> Self {
        Self {
            kind: LossKind::EntropicWasserstein,
            cost,
            ot: EntropicOTConfig::new(1e-3, 10, 1e-6).expect("valid defaults"),
            mass_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ot.validate()?;
        if !(self.mass_weight >= 0.0 && self.mass_weight.is_finite()) {
            return Err(Error::Precondition(format!(
                "mass weight must be nonnegative, got {}",
                self.mass_weight
            )));
        }
        Ok(())
    }
}

/// A loss bound to a grid, with the transport kernel precomputed.
#[derive(Debug, Clone)]
pub struct PreparedLoss {
    spec: LossSpec,
    stencil: Option<Arc<KernelStencil>>,
}

impl PreparedLoss {
    pub fn new(spec: LossSpec, grid: PixelGrid) -> Result<Self> {
        spec.validate()?;
        let stencil = match spec.kind {
            LossKind::MeanSquaredError => None,
            LossKind::EntropicWasserstein => Some(Arc::new(build_stencil(grid, spec.cost, spec.ot.epsilon)?)),
        };
        Ok(Self { spec, stencil })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn stencil(&self) -> Option<&KernelStencil> {
        self.stencil.as_deref()
    }

    /// Loss of a raw network output against `truth` and its gradient wrt that output.
    pub fn evaluate(&self, output: &[f64], truth: &DiscreteMeasure) -> Result<OutputLoss> {
        if output.len() != truth.values().len() {
            return Err(Error::Contract("output and truth sizes differ".into()));
        }
        match &self.stencil {
            None => Ok(mse_loss(output, truth.values())),
            Some(st) => ot_loss(output, truth, st, &self.spec),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutputLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `(mass(out) − mass(f)) / mass(f)`, with `out` rectified for the transport loss.
    pub mass_error: f64,
    /// Transport term alone (zero for the squared error).
    pub transport: f64,
}

/// `(1/n) ‖out − f‖²`.
pub fn mse_loss(output: &[f64], truth: &[f64]) -> OutputLoss {
    let n = output.len() as f64;
    let loss = output
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let grad = output
        .iter()
        .zip(truth)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect();
    let mt: f64 = truth.iter().sum();
    let mo: f64 = output.iter().sum();
    OutputLoss {
        loss,
        grad,
        mass_error: if mt != 0.0 { (mo - mt) / mt } else { 0.0 },
        transport: 0.0,
    }
}

/// Rectify the output, rescale it to the truth's mass, add the background floor to both
/// sides and run the unrolled Sinkhorn loss; add `λ ((s − m)/m)²` on the rectified mass
/// `s`. The gradient follows the rescaling factor `m/s`.
pub fn ot_loss(
    output: &[f64],
    truth: &DiscreteMeasure,
    stencil: &KernelStencil,
    spec: &LossSpec,
) -> Result<OutputLoss> {
    let mt = mass(truth);
    if !(mt > 0.0) {
        return Err(Error::Degenerate(format!("ground truth has mass {mt}")));
    }
    let rect: Vec<f64> = output.iter().map(|&v| v.max(0.0)).collect();
    let s: f64 = rect.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Degenerate(format!("network output has mass {s}")));
    }
    let factor = mt / s;
    let normalized =
        DiscreteMeasure::new(*truth.grid(), rect.iter().map(|v| v * factor).collect())?;
    let run = sinkhorn(&normalized, truth, stencil, &spec.ot)?;
    let (g0, _) = sinkhorn_grad(&run, stencil, &normalized, truth)?;
    let rel = (s - mt) / mt;
    let loss = run.value + spec.mass_weight * rel * rel;
    let inner: f64 = g0.iter().zip(&rect).map(|(g, r)| g * r).sum();
    let penalty = 2.0 * spec.mass_weight * rel / mt;
    let grad = output
        .iter()
        .zip(&g0)
        .map(|(&o, &g)| {
            if o > 0.0 {
                factor * g - factor * inner / s + penalty
            } else {
                0.0
            }
        })
        .collect();
    Ok(OutputLoss {
        loss,
        grad,
        mass_error: rel,
        transport: run.value,
    })
}

#[derive(Debug, Clone)]
pub struct LossGradient<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    pub mass_error: f64,
    pub transport: f64,
}

/// Forward the network on `pair.data`, evaluate the loss against `pair.truth` in f64
/// and backpropagate to the parameters.
pub fn loss_forward_backward<T: Scalar>(
    net: &PrimalDualNet<T>,
    pair: &TrainingPair,
    loss: &PreparedLoss,
) -> Result<LossGradient<T>> {
    let mut fw = net.forward(&pair.data)?;
    let out: Vec<f64> = fw.tape.values(fw.output).iter().map(|v| v.as_f64()).collect();
    let ol = loss.evaluate(&out, &pair.truth)?;
    if !ol.loss.is_finite() {
        return Err(Error::breakdown("loss", format!("loss evaluated to {}", ol.loss)));
    }
    let seed: Vec<T> = ol.grad.iter().map(|&g| T::lit(g)).collect();
    let grad = fw.tape.backward(fw.output, &seed, net.params().len())?;
    Ok(LossGradient {
        loss: ol.loss,
        grad,
        mass_error: ol.mass_error,
        transport: ol.transport,
    })
}

/// Loss without the backward pass.
pub fn loss_value<T: Scalar>(
    net: &PrimalDualNet<T>,
    pair: &TrainingPair,
    loss: &PreparedLoss,
) -> Result<OutputLoss> {
    let out = net.reconstruct(&pair.data)?;
    loss.evaluate(out.values(), &pair.truth)
}
