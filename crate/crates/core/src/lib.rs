pub mod error;
pub mod instance;
pub mod marginals;
pub mod payoff;
pub mod simplex;
pub mod solver_exact;
pub mod dual_recovery;
pub mod hull;
pub mod solver_entropic;
pub mod verify;
pub mod io;
