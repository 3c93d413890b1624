//! Checks shared by the focused test targets and the acceptance report.
#![allow(dead_code)]

pub mod grad;
pub mod invariant;
pub mod oracle;
