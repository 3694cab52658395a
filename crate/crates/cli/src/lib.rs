//! Command dispatcher for the `gaitlab` binary. The dispatcher lives in the
//! library so tests can drive it in-process with [`run`].

pub mod app;
pub mod config;

pub use app::run;
