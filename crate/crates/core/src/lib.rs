//! Moment incremental stability for discrete-time stochastic nonlinear systems.

pub mod matcore;
pub mod process;
pub mod sysmodel;
pub mod lmi;
pub mod synth;
pub mod certify;
pub mod verify;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/systems.md")]
    pub mod systems {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/markov.md")]
    pub mod markov {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    pub mod synthesis {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
