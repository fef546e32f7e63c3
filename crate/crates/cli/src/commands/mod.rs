pub mod ablate;
pub mod data;
pub mod probe;
pub mod report;
pub mod train;
