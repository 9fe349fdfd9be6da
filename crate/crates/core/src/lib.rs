//! Toolchain for block-based CNN inference on a coarse-grained accelerator.
//!
//! The crate covers the whole path from a network description to a
//! bit-exact run on a functional model of the machine:
//!
//! - [`fixedpoint`]: dynamic fixed-point formats and exact accumulation
//! - [`modelir`]: network description, ERNet builders, complexity, scanning
//! - [`blockflow`]: truncated-pyramid block geometry and bandwidth models
//! - [`fbisa`]: instruction set, assembler and model compiler
//! - [`paramcodec`]: Huffman-coded parameter streams
//! - [`simcore`]: simulator, frame oracle and performance model
//! - [`quantflow`]: post-training quantization
//!
//! With the default `parallel` feature, block execution, model scans and
//! stream decoding run on a rayon pool; without it they run sequentially
//! and produce identical results.

pub mod blockflow;
pub mod fbisa;
pub mod fixedpoint;
pub mod modelir;
pub mod par;
pub mod paramcodec;
pub mod quantflow;
pub mod simcore;
pub mod tensor;
