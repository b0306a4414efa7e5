//! Acceptance run for `freeconv`. Everything lives in `tests/acceptance.rs`;
//! run it with `cargo test -p freeconv-acceptance`.
