pub mod cli;
pub mod dataio;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod refine;
pub mod scale;
pub mod sim;
pub mod stats;
