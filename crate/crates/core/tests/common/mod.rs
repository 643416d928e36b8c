// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference computations shared by the integration tests.

#![allow(dead_code)]

pub mod ops;
pub mod reference;
