pub mod activity;
pub mod evaluate;
pub mod importance;
pub mod quality;
pub mod score;
pub mod synth;
