//! weldscan: automated defect segmentation for weld radiographs.
//!
//! The crate covers the full inspection pipeline at desk scale:
//!
//! 1. **imagecore** – grayscale rasters, masks, filtering, affine resampling, PGM I/O.
//! 2. **synthgen** – deterministic synthetic weld radiographs with cracks and pores.
//! 3. **augment** – patch sampling, standard augmentation, virtual-flaw extraction and re-embedding.
//! 4. **nnet** – a small encoder–decoder segmentation network with hand-written backprop and Adam.
//! 5. **infer** – overlapping sliding-window inference with OR-merging.
//! 6. **postproc** – connected components, Feret sizing, shape fitting, porosity chains, acceptance.
//! 7. **evalnde** – hit/miss matching, logistic POD with a90/95, sizing error, false-call rates,
//!    k-fold cross-validation and the strategy × fraction experiment grid.

pub mod augment;
pub mod error;
pub mod evalnde;
pub mod imagecore;
pub mod infer;
pub mod nnet;
pub mod postproc;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
