//! End-to-end differentiable OFDM link simulator.
//!
//! The crate simulates a single-stream SIMO OFDM link at slot granularity and
//! trains a pilot-free, CP-free learned transceiver — trainable constellation
//! geometry plus a convolutional neural receiver — directly against the
//! waveform-domain channel, next to conventional pilot-based baselines
//! (LS/LMMSE estimation with a Gaussian demapper, perfect-CSI bounds).
//!
//! Everything differentiable runs on the in-crate reverse-mode autodiff
//! engine ([`autodiff`]); there is no external ML dependency. All randomness
//! flows from explicit seeds and every numeric loop has a fixed summation
//! order, so any command with the same seed and config reproduces its outputs
//! bit-for-bit.
//!
//! Modules, bottom of the stack first:
//!
//! * [`autodiff`] — dense `f64` tensors, an eager tape, reverse-mode gradients
//! * [`dft`] — precomputed unitary (I)DFT matrices, shared by the numeric and
//!   differentiable signal paths
//! * [`phy`] — resource grid, OFDM modulation, cyclic prefix, PAPR, clipping
//! * [`channel`] — tapped-delay-line Rayleigh/Rician channels with Jakes
//!   Doppler, AWGN, Eb/N0 accounting
//! * [`constellation`] — trainable constellation with QAM init, normalization,
//!   nested multi-order subsets
//! * [`coding`] — (3,6)-regular LDPC code: construction, encoder, sum-product
//!   decoder
//! * [`receiver`] — the neural receiver: residual CNN backbone, channel
//!   adapters, LLR masking
//! * [`baseline`] — conventional receiver chain and perfect-CSI bounds
//! * [`training`] — losses, Adam, the augmented-Lagrangian training loop,
//!   adapter-only fine-tuning
//! * [`checkpoint`] — deterministic binary serialization of parameters and
//!   optimizer state
//! * [`config`] — layered run configuration
//! * [`eval`] — Monte-Carlo BER/BLER/throughput sweeps, PAPR CCDF, link
//!   adaptation, CSV/JSON output

pub mod autodiff;
pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod coding;
pub mod config;
pub mod constellation;
pub mod dft;
pub mod eval;
pub mod guide;
pub mod phy;
pub mod receiver;
pub mod training;
