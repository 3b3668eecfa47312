//! Classical comparators: Gaussian-mixture dynamic thresholding for
//! sea-land segmentation and a Sobel, dilate, Roberts coastline detector.
//!
//! Both operate on the HH channel of a single scene or tile and produce
//! outputs that feed [`crate::metrics`] unchanged.

mod gmm;
mod sobel;

pub use gmm::{fit_gmm_em, gmm_segment, gmm_threshold, GmmFit, GmmSegmentation, GmmThreshold, Gmm1D, VARIANCE_FLOOR};
pub use sobel::{dilate, otsu_threshold, roberts_edges, sobel_magnitude, sobel_pipeline, SobelParams};
