pub mod audiofeatures;
pub mod error;
pub mod frames;
pub mod generators;
pub mod invariants;
pub mod linalg;
pub mod manifold;
pub mod moments;
pub mod pipeline;
pub mod separability;
pub mod stitch;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/invariants.md")]
    mod invariants {}
    #[doc = include_str!("../../../book/src/separation.md")]
    mod separation {}
    #[doc = include_str!("../../../book/src/audio.md")]
    mod audio {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
}
