pub mod dataset;
pub mod geometry;
pub mod isd;
pub mod labels;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod predicate;
pub mod ranking;
pub mod scene;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;
