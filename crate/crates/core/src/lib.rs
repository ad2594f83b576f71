pub mod cli;
pub mod container;
pub mod deeponet;
pub mod gradcheck;
pub mod linalg;
pub mod ls_step;
pub mod model_file;
pub mod nets;
pub mod train;
pub mod datagen;
