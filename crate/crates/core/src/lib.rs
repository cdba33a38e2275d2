//! Sketch-guided, progressively grown conditional GAN for synthesizing
//! ultrasound-like phantom images from edited label maps.

pub mod checkpoint;
pub mod error;
pub mod fib;
pub mod filter;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod sgan;
pub mod sketch;
pub mod trainer;

pub use error::{Error, Result};
pub use fib::{FibBlock, FibDirection, FibState, StepUnit};
pub use image::{ClassMap, ImageTensor};
pub use nn::{Adam, Float, Module, Tensor4};
pub use phantom::{generate_dataset, generate_phantom, Manifest, PhantomConfig, Sample};
pub use sgan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LossReport, TrainOptions};
pub use sketch::{canny, compose_label, CannyParams, CompositeLabel, EdgeMap};
pub use metrics::{FeatureExtractor, MetricReport};
pub use trainer::{PhasePlan, Trainer, TrainingSet};
