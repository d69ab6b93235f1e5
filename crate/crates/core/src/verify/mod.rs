//! Executable evidence for the compressor's behavioral claims:
//! a scalar-loop attention oracle, finite-difference gradient
//! certification over every variant, and a synthetic retrieval task
//! that shows instruction guidance steering attention.

pub mod certify;
pub mod oracle;
pub mod toy;
