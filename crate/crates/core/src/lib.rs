pub mod autodiff;
pub mod dataset;
pub mod inference;
pub mod model;
pub mod preprocess;
pub mod ranking;
pub mod training;
