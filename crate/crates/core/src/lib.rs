// SPDX-License-Identifier: MIT OR Apache-2.0

//! Truthfulness probing and representation editing with a dual-space
//! auto-encoder, plus a small tapped transformer to edit.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod probe;
pub mod site;
pub mod tensorfile;
pub mod toylm;
pub mod trainer;

pub use error::{Error, Result};
pub use site::{ModuleKind, ProbeSite};
