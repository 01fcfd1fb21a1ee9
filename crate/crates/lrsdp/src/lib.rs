pub mod error;
pub mod factor;
pub mod feasible;
pub mod instances;
pub mod linalg;
pub mod oracle;
pub mod palm;
pub mod precond;
pub mod problem;
pub mod report;
pub mod sdpa;
pub mod subproblem;

pub use error::{Error, Result};
