//! Runs the built-in checks, including the finite-difference gradient check.

fn main() {
    let report = postrank::verify::run_suite(0);
    print!("{}", report.render());
    if !report.passed() {
        std::process::exit(1);
    }
}
