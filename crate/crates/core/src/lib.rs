// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod basis;
pub mod config;
pub mod edit;
pub mod error;
pub mod eval;
pub mod layout;
pub mod model;
pub mod optim;
pub mod plot;
pub mod presets;
pub mod prompt;
pub mod relevance;
pub mod run;
pub mod store;

pub use error::{Error, Result};
