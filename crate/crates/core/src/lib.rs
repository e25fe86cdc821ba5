pub mod autodiff;
pub mod tensor;
pub mod transforms;
pub mod model;
pub mod optim;
pub mod data;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;
pub mod eval;
pub mod verify;
