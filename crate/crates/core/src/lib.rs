pub mod checkpoint;
pub mod discriminator;
pub mod exec;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod pretrain;
pub mod synth;
pub mod training;
