// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line pipeline and HTTP service for `stylesteer`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod service;
pub mod session;
