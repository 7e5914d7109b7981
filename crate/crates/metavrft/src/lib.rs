//! Direct data-driven model-reference control design by meta-learning.
//!
//! Given input/output records from a plant and a meta-dataset of controllers
//! already tuned on similar plants (with their tuning data and closed-loop
//! test records), the library tunes a new controller as a convex combination
//! of the available ones. The combination weights minimize an instrumental
//! variable matching loss with similarity and performance regularization,
//! subject to simplex constraints and an optional data-driven stability
//! constraint evaluated on a spectral grid.

pub mod bench;
pub mod cli;
pub mod error;
pub mod lti;
pub mod metadesign;
pub mod signals;
pub mod solver;
pub mod spectral;
pub mod vrft;

pub use error::{Error, Result};
pub use lti::{Basis, ControllerParams, TransferFunction};
pub use metadesign::{DesignConfig, MetaDataset, MetaWeights};
pub use signals::Dataset;
