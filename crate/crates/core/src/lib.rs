pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fpa;
pub mod model;
pub mod run;
pub mod mop;
pub mod sdaq;
pub mod tasks;
pub mod train;

pub use error::{PetsError, Result};
