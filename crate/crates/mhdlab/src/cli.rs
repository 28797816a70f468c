//! Command-line front end (placeholder).

pub fn run_cli(_args: &[String]) -> i32 {
    0
}
