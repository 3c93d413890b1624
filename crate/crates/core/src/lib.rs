pub mod autograd;
pub mod backbone;
pub mod cka;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mcp;
pub mod model;
pub mod msp;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod trainer;
