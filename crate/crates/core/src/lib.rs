pub mod dataset;
pub mod kernel;
pub mod spline;
pub mod linalg;
pub mod fit;
pub mod averaging;
pub mod simulation;
