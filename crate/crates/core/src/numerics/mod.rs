//! Tensor substrate: primitives with exact analytic gradients, Adam, and
//! learning-rate schedules.

pub mod adam;
pub mod ops;
pub mod params;
mod real;
pub mod schedule;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{clip_grad_norm, Param, Parameterized};
pub use real::{DType, Real};
pub use schedule::{lr_at, ScheduleSpec};
pub use tensor::Tensor;
