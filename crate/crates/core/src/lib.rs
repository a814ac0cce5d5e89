// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod abc;
pub mod corpus;
pub mod experiments;
pub mod localization;
pub mod seed;
pub mod shallow;
pub mod steering;
pub mod tinylm;
