pub mod ascent;
pub mod error;
pub mod event;
pub mod lasso;
pub mod lasso_mle;
pub mod normal;
pub mod normal_means;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod tmvn;
pub mod trunc;

pub use error::{Error, Result};
