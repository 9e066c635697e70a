pub mod evaluate;
pub mod metrics;
pub mod simulate;
pub mod train;
