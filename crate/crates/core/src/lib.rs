pub mod belief;
pub mod controllers;
pub mod environments;
pub mod error;
pub mod gp;
pub mod harness;
pub mod learning_loop;
pub mod linalg;
pub mod normal;
pub mod objectives;
pub mod optimizer;
pub mod propagation;
pub mod se_moments;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/gp_dynamics.md")]
    mod gp_dynamics {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/controllers.md")]
    mod controllers {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/learning_loop.md")]
    mod learning_loop {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
