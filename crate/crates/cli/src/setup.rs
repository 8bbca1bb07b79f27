//! Building library objects from a [`Config`].

use otrecon_core::datagen::{Dataset, MisalignmentSpec, NoiseSpec, PhantomSpec};
use otrecon_core::diffnet::{LossKind, LossSpec, NetConfig};
use otrecon_core::tomography::ParallelBeamGeometry;
use otrecon_core::training::{CosineSchedule, DataConfig, TrainConfig};
use otrecon_core::transport::{EntropicOTConfig, TransportCost};
use otrecon_core::PixelGrid;

use crate::config::Config;
use crate::error::CliResult;

pub fn grid(c: &Config) -> CliResult<PixelGrid> {
    Ok(PixelGrid::square(c.usize("grid"))?)
}

/// Scale a 64-px default to the configured grid.
fn scaled(c: &Config, at64: f64) -> f64 {
    at64 * c.usize("grid") as f64 / 64.0
}

pub fn geometry(c: &Config) -> CliResult<ParallelBeamGeometry> {
    let g = grid(c)?;
    let detectors = match c.auto_int("detectors") {
        Some(d) => d as usize,
        None => ParallelBeamGeometry::desk(&g).detectors(),
    };
    Ok(ParallelBeamGeometry::new(
        c.usize("angles"),
        detectors,
        c.real("detector_spacing"),
    )?)
}

pub fn shift_bound(c: &Config) -> f64 {
    c.auto_real("shift_bound").unwrap_or_else(|| scaled(c, 5.0))
}

pub fn phantom(c: &Config) -> CliResult<PhantomSpec> {
    let g = grid(c)?;
    let shift = shift_bound(c);
    let desk = PhantomSpec::desk(g, shift);
    let radius = (
        c.auto_real("radius_min").unwrap_or(desk.radius.0),
        c.auto_real("radius_max").unwrap_or(desk.radius.1),
    );
    let spec = PhantomSpec {
        grid: g,
        count: (c.usize("circles_min"), c.usize("circles_max")),
        radius,
        intensity: (c.real("intensity_min"), c.real("intensity_max")),
        margin: c.auto_real("margin").unwrap_or(radius.1 + shift),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn misalignment(c: &Config) -> CliResult<MisalignmentSpec> {
    Ok(MisalignmentSpec::new(shift_bound(c), c.flag("per_circle"))?)
}

pub fn noise(c: &Config) -> CliResult<NoiseSpec> {
    Ok(NoiseSpec::new(c.real("noise"))?)
}

pub fn dataset(c: &Config) -> CliResult<Dataset> {
    Ok(Dataset::new(
        c.int("seed"),
        phantom(c)?,
        misalignment(c)?,
        noise(c)?,
        geometry(c)?,
    )?)
}

pub fn net(c: &Config) -> CliResult<NetConfig> {
    let cfg = NetConfig {
        stages: c.usize("stages"),
        primal: c.usize("primal"),
        dual: c.usize("dual"),
        filters: c.usize("filters"),
        grid: grid(c)?,
        geometry: geometry(c)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cost(c: &Config) -> CliResult<TransportCost> {
    Ok(match c.text("cost") {
        "squared" => TransportCost::squared_distance(),
        _ => TransportCost::bounded_quartic(c.auto_real("cost_sigma").unwrap_or_else(|| scaled(c, 10.0)))?,
    })
}

pub fn loss(c: &Config) -> CliResult<LossSpec> {
    let spec = LossSpec {
        kind: match c.text("loss") {
            "ot" => LossKind::EntropicWasserstein,
            _ => LossKind::MeanSquaredError,
        },
        cost: cost(c)?,
        ot: EntropicOTConfig::new(
            c.real("epsilon"),
            c.usize("sinkhorn_iterations"),
            c.real("background"),
        )?,
        mass_weight: c.real("mass_weight"),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn train(c: &Config) -> CliResult<TrainConfig> {
    let steps = c.int("steps");
    let cfg = TrainConfig {
        net: net(c)?,
        data: DataConfig {
            seed: c.int("seed"),
            phantom: phantom(c)?,
            misalignment: misalignment(c)?,
            noise: noise(c)?,
        },
        loss: loss(c)?,
        steps,
        schedule: CosineSchedule {
            initial: c.real("lr"),
            total: c.auto_int("schedule_steps").unwrap_or(steps),
            floor: c.real("lr_floor"),
        },
        clip_norm: c.real("clip"),
        seed: c.int("seed"),
        checkpoint_every: c.int("checkpoint_every"),
        validate_every: c.int("validate_every"),
        validation_size: c.usize("validation_size"),
    };
    cfg.validate()?;
    Ok(cfg)
}
