pub mod conic;
pub mod error;
pub mod invariance;
pub mod model;
pub mod pcbf;
pub mod safempc;
pub mod simfilter;

pub use error::{Error, Result};
