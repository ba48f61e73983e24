//! Desk-scale laboratory for learning with noisy labels by dual-loss data
//! selection and joint training of two networks.
//!
//! Each epoch, every network is profiled on the training set with two
//! per-sample losses: cross-entropy against the dataset label and against its
//! own argmax prediction. A three-component bivariate Gaussian mixture fitted
//! to the normalized loss cloud splits the data into a correctly-labeled set,
//! a correctly-predicted set and a wrong set. The split computed from one
//! network drives the label refinement, sharpening and MixUp training of the
//! other.
//!
//! Module map:
//!
//! - [`nn`]: dense ReLU classifier, softmax / cross-entropy, backprop, SGD.
//! - [`noise`]: synthetic blobs, label-noise injection, sample-state audit.
//! - [`profile`]: per-sample loss pairs and min-max normalization.
//! - [`gmm`]: EM for a 3-component 2-D Gaussian mixture.
//! - [`select`]: role assignment, selection weights, partition, co-divide.
//! - [`trainer`]: warmup, refinement, sharpening, MixUp, DST epochs.
//! - [`config`] and [`lab`]: experiment configuration, runs and artifacts.

pub mod config;
pub mod error;
pub mod gmm;
pub mod lab;
pub mod nn;
pub mod noise;
pub mod profile;
pub mod rng;
pub mod select;
pub mod trainer;

pub use error::{Error, Result};
