//! Symmetric covariance smoothing and functional principal component analysis
//! for sparse and irregular multilevel functional data.

pub mod crossprod;
pub mod error;
pub mod fpca;
pub mod funcdata;
pub mod output;
pub mod par;
pub mod remlfit;
pub mod simlab;
pub mod splinebasis;
pub mod symsmooth;

pub use error::{Result, SymCovError};
