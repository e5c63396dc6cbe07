pub mod backbone;
pub mod bandit;
pub mod densela;
pub mod error;
pub mod gp_posterior;
pub mod harness;
pub mod ntk_features;
pub mod posthoc;
pub mod transform;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
