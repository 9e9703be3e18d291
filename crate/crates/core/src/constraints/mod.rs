//! Equality and inequality terms of the transport problem and the relaxed barrier
//! that turns inequalities into smooth penalties.

mod primitives;
mod stage;
mod terrain;

pub use primitives::*;
pub use stage::*;
pub use terrain::*;
