pub mod entropy;
pub mod ldpc;
pub mod toeplitz;
pub mod decoy;
pub mod correlate;
pub mod sift;
pub mod pipeline;
