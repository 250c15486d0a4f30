//! First hitting diffusion models: absorbing diffusions on spheres, Boolean
//! cubes, one-hot simplices, fixed-time planes and half-spaces, their exit
//! kernels and bridges, and a trainable drift network.

pub mod batch;
pub mod bridges;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod h_sampler;
pub mod io;
pub mod net;
pub mod schemes;
pub mod sde;
pub mod special;
pub mod training;

pub use error::{Error, Result};
pub use schemes::{Scheme, SchemeKind};
pub use sde::{simulate, simulate_batch, SimConfig, Trajectory};
pub use batch::SampleBatch;
pub use bridges::{build_pool, simulate_bridge, BridgePool};
