pub mod autodiff;
pub mod skeleton;
pub mod partition;
pub mod encoder;
pub mod fusion;
pub mod model;
pub mod checkpoint;
pub mod harness;
