//! Small dense networks with hand-written backpropagation.

mod adam;
mod mlp;

pub use adam::Adam;
pub use mlp::{Dense, Gradients, Mlp, OutputActivation};

use std::path::Path;

use crate::error::Result;
use crate::Scalar;

/// Writes a network as JSON: layer shapes plus row-major parameters.
pub fn save_checkpoint<T: Scalar>(net: &Mlp<T>, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(net)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Mlp<T>> {
    let net: Mlp<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    net.check()?;
    Ok(net)
}
