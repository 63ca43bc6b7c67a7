//! Synthesis, registration and fusion of photoacoustic (PAT) and MR images.
//!
//! The pipeline turns a PAT image into a pseudo-MRI with a style-transfer
//! generator ([`synthnet`]), registers the pseudo-MRI onto the real MRI with
//! a multi-level network ([`regnet`]), resamples the PAT image with the
//! estimated field ([`warpfield`]) and fuses the aligned pair with a
//! dual-branch decomposition network ([`fusenet`]). [`trainer`] runs the
//! two-stage training protocol and [`metrics`] scores the results.

pub mod error;
pub mod fusenet;
pub mod imagedata;
pub mod metrics;
pub mod params;
pub mod perceptual;
pub mod regnet;
pub mod synthnet;
pub mod trainer;
pub mod warpfield;

pub use error::{FuseError, Result};
pub use fusekit_autograd as autograd;
pub use imagedata::{Image, Modality, PhantomPair};
pub use warpfield::DeformationField;
