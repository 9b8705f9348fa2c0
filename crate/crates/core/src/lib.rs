//! Two agents playing an iterated prisoner's dilemma over an edge they can
//! make or break, each learning with Double DQN and prioritized replay.
//!
//! - [`env`]: the game, the connection state machine and observation encoding.
//! - [`nn`]: the 8-16-16-2 Q-network, its gradient and the Adam optimizer.
//! - [`replay`]: sum-tree prioritized experience replay.
//! - [`agent`]: Q-heads, the Double-DQN update, and fixed policies.
//! - [`experiment`]: runs, grids, metrics and cross-seed analysis.
//! - [`selfcheck`]: property suites shipped with the binary.
//!
//! ```
//! use ipd_rewire::env::{self, InteractionAction::*, RewiringAction::*, RewiringSchedule};
//!
//! let (mut state, _obs) = env::reset(RewiringSchedule::FullRewiring);
//! let out = env::step(&mut state, [Connect, Disconnect], [Cooperate, Cooperate]).unwrap();
//! assert!(!out.connected_after);
//! assert_eq!(out.payoffs, (0.0, 0.0));
//! ```

pub mod agent;
pub mod env;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod replay;
pub mod selfcheck;

pub use error::{EnvError, NetError, ReplayError, SimError};

/// Guide chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/q-network.md")]
    mod q_network {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/agents.md")]
    mod agents {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
