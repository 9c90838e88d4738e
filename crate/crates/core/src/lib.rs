mod binio;
pub mod checkpoint;
pub mod diffnum;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod graph;
pub mod hybrid;
pub mod panel;
pub mod pipeline;
pub mod preprocess;
pub mod spatial;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, Result};
