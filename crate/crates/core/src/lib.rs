pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod featio;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
