//! Noise schedule, forward noising, clean-image prediction and the
//! deterministic reverse sampler.

mod noise;
mod pgm;
mod sampler;
mod schedule;

pub use noise::NoiseSource;
pub use pgm::{decode_pgm, encode_pgm, square_side, to_pixel, write_pgm};
pub use sampler::{sample, SampleOutput, SamplerConfig, DEFAULT_NUM_STEPS};
pub use schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS};
