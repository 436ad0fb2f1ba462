use mftf_core::{DenoiserBackend, ToyBackend, ToyConfig};
use mftf_ldm::{parse_device, LdmBackend};

use crate::error::CliError;
use crate::{BackendKind, Cli};

pub type Backend = Box<dyn DenoiserBackend + Sync>;

/// Instantiate the selected backend. `toy` configures the toy model, and
/// `image_size` the real one.
pub fn build(cli: &Cli, toy: Option<&ToyConfig>, image_size: Option<(usize, usize)>) -> Result<Backend, CliError> {
    match cli.backend {
        BackendKind::Toy => {
            let cfg = toy.cloned().unwrap_or_default();
            Ok(Box::new(ToyBackend::new(cfg)?))
        }
        BackendKind::Ldm => {
            let device = parse_device(&cli.device)?;
            let size = image_size.map(|(h, w)| [h, w]);
            Ok(Box::new(LdmBackend::from_env(&device, size)?))
        }
    }
}
