pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod pipeline;
