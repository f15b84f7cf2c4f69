//! Adversarial patch synthesis against monocular disparity models.
//!
//! The engine jointly optimizes the texture, shape, and position of an
//! image patch so that a differentiable disparity model mispredicts the
//! depth of a target object composited into random scenes. Everything is
//! deterministic for fixed seeds: the autodiff tape, the PRNG, the codecs,
//! and the optimization loop itself.
//!
//! Module map:
//! - [`ndgrad`] — reverse-mode autodiff tensor core (f64, row-major).
//! - [`imaging`] — PPM/PGM codecs and the seeded PRNG.
//! - [`maskgen`] — differentiable mask families (rect, quad, circle, ellipse, oval).
//! - [`compositor`] — patch application, random object transforms, scene embedding.
//! - [`depthmodel`] — pluggable disparity model, built-in seeded surrogate, depth conversion.
//! - [`losses`] — adversarial and regularization loss terms.
//! - [`attack`] — the optimization loop, Adam, target construction, checkpointing.
//! - [`baselines`] — differential-evolution shape search and Gaussian mask aggregation.
//! - [`evalrobust`] — metrics, input-defense transforms, patch-size sweep.
//! - [`cli`] — experiment configuration and subcommand runners.
//! - [`synth`] — deterministic synthetic objects/scenes for tests and demos.

pub mod attack;
pub mod baselines;
pub mod cli;
pub mod compositor;
pub mod depthmodel;
pub mod evalrobust;
pub mod imaging;
pub mod losses;
pub mod maskgen;
pub mod ndgrad;
pub mod synth;
