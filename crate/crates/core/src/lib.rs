//! Synthetic soundscape generation and convolutional-recurrent sound event
//! detection for passive acoustic bird monitoring.

pub mod audio;
pub mod crnn;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod labelgrid;
pub mod species;
pub mod synth;
pub mod toy;
