pub mod checkpoint;
pub mod error;
pub mod evalharness;
pub mod finetune;
pub mod latentheads;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod pretrain;
pub mod real;
pub mod seed;
pub mod synthworld;
pub mod tape;
pub mod textfront;
pub mod vlmcore;
