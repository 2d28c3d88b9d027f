pub mod datastream;
pub mod enhancer;
pub mod harness;
pub mod meta;
pub mod numcore;
pub mod serve_eval;
pub mod towers;
