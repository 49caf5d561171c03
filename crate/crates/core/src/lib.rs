//! Serial, streaming federated meta-learning.
//!
//! A server keeps a shared initialization and trains it with one client per
//! round. The client streams its support set through a single SGD step per
//! sample and returns its weights; the server moves toward them. Reptile,
//! FedAVG, FedSGD and a joint-training baseline are included for comparison,
//! along with a framed wire protocol and an experiment harness.
//!
//! The guide in `book/` walks through each layer with runnable examples.

pub mod harness;
pub mod instrument;
pub mod meta;
pub mod nn;
pub mod protocol;
pub mod seeds;
pub mod tasks;

// The guide's code blocks run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/algorithms.md")]
    mod algorithms {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
}
