//! Shared helpers for integration tests: independent oracles that the
//! library is checked against.

// Each integration-test binary links this module but uses a different
// subset of the oracles, so unused-function lints are expected noise here.
#![allow(dead_code)]

pub mod oracles;
