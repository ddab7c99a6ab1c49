//! Body-model lifting and fitting toolkit.
//!
//! * [`body_model`]: parametric articulated body, skinning and landmark regression
//! * [`sampling`]: synthetic training pairs and dataset files
//! * [`mixer`]: MLP-Mixer lifter with exact gradients
//! * [`trainer`]: lifter loss, Adam and the training loop
//! * [`fitting`]: 2D keypoint fitting with ordinal depth constraints
//! * [`metrics`]: MPJPE, Procrustes alignment and hand error
//! * [`recrop`]: oriented hand crops and their refinement
//! * [`obj`]: mesh export
//! * [`cli`]: the `bodylift` command line

pub mod body_model;
pub mod cli;
pub mod fitting;
pub mod metrics;
pub mod mixer;
pub mod obj;
pub mod recrop;
pub mod rotation;
pub mod sampling;
pub mod trainer;
