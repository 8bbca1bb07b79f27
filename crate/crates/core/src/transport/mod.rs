//! Entropy-regularized optimal transport on pixel grids.

pub mod cost;
pub mod exact;
pub mod metric;
pub mod sinkhorn;
pub mod stencil;

pub use cost::{CostForm, TransportCost};
pub use exact::{exact_transport, exact_transport_atoms, Atom};
pub use metric::{exact_wasserstein, metric_cost, wasserstein_p};
pub use sinkhorn::{sinkhorn, sinkhorn_grad, EntropicOTConfig, SinkhornRun};
pub use stencil::{build_stencil, KernelMethod, KernelStencil};
