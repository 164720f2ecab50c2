pub mod assembly;
pub mod banded;
pub mod config;
pub mod deim;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kkt;
pub mod mesh;
pub mod pipeline;
pub mod pod;
pub mod rom;
pub mod sparse;
pub mod timing;

pub use error::{Error, Result};

/// Order-preserving map, parallel when the `parallel` feature is on.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
