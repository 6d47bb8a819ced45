//! Network architectures, weight initialization and checkpoint files.

mod checkpoint;
mod network;
mod profile;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use network::{Architecture, Bound, GanPair, Mode, Network, ParamSpec, Role, Topology};
pub use profile::ModelProfile;

use crate::error::Result;
use crate::scalar::Scalar;

pub fn build_generator<T: Scalar>(profile: &ModelProfile, seed: u64) -> Result<Network<T>> {
    Network::new(Role::Generator, profile, seed)
}

pub fn build_discriminator<T: Scalar>(profile: &ModelProfile, seed: u64) -> Result<Network<T>> {
    Network::new(Role::Discriminator, profile, seed)
}

pub fn build_classifier<T: Scalar>(profile: &ModelProfile, seed: u64) -> Result<Network<T>> {
    Network::new(Role::Classifier, profile, seed)
}
