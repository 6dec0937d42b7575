pub mod circuit;
pub mod report;
pub mod sweep;
pub mod train;
