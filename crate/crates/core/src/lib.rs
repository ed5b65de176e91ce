pub mod config;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod rolling;
pub mod scenarios;
pub mod scene;
pub mod sensor;
pub mod spatial;
pub mod synth;
pub mod ut;

pub use error::{Error, Result};
