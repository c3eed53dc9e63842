//! Host-side tooling for the edgellm accelerator model: configuration
//! presets, packed-weight and program files, activation dumps and event
//! logs.

pub mod config;
pub mod dump;
pub mod events;
pub mod formats;
pub mod sweep;

pub use config::ConfigFile;
pub use formats::{FormatError, ProgramBundle};
