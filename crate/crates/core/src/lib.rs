pub mod archive;
pub mod attention;
pub mod backend;
pub mod bgmask;
pub mod dpl;
pub mod error;
pub mod edit;
pub mod eval;
pub mod fixture;
pub mod inversion;
pub mod nulltext;
pub mod optim;

pub use error::{Error, Result};
