pub mod cohort;
pub mod dataset;
pub mod eval;
pub mod explain;
pub mod features;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod train;
