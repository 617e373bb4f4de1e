pub mod calibrate;
pub mod corpus;
pub mod error;
pub mod explainer;
pub mod gradsuite;
pub mod manifest;
pub mod metrics;
pub mod passport;
pub mod pipeline;
pub mod synth;
pub mod tensorcore;
pub mod text;

pub use error::{Error, Result};
