//! Holds the long-running acceptance target; see `tests/acceptance.rs`.
