pub mod bench;
pub mod complexity;
pub mod eval;
pub mod infer;
pub mod preprocess;
pub mod synth;
pub mod train;
