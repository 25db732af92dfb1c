//! Free-floating space manipulator toolkit.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod kinematics;
pub mod math;
pub mod model;
pub mod planner;
pub mod scenario;

pub use error::{Result, SmsError};
pub use model::{BodyParams, SmsModel, SmsState};
