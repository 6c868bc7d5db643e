//! Acceptance suite for `evcal`. The criteria live in `tests/acceptance.rs`:
//!
//! ```sh
//! cargo test -p evcal-validation --test acceptance
//! ```
