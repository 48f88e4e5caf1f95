//! Grid-forming inverter control under current limits: phasor algebra,
//! forming references, cross-forming regulators, limiters, negative-sequence
//! control, network solution, a dynamic-phasor simulator and stability tools.

pub mod analysis;
pub mod bundled;
pub mod cross_forming;
pub mod error;
pub mod forming;
pub mod integrate;
pub mod limiting;
pub mod neg_seq;
pub mod network;
pub mod phasor;
pub mod record;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod stability;
pub mod verify;

pub use error::{Error, Result};
pub use phasor::{Cx, SequencePhasor};
