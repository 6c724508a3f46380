// Finite-difference check of every layer and of the mixed network.

use mumkit::gradsuite::run_suite;

fn main() -> mumkit::Result<()> {
    let lines = run_suite()?;
    for l in &lines {
        println!("{:<5} {:<58} {:>5} entries  max rel err {:.2e} (bound {:.0e})",
            if l.passed() { "ok" } else { "FAIL" }, l.name, l.checked, l.max_rel_err, l.tolerance);
    }
    assert!(lines.iter().all(|l| l.passed()));
    Ok(())
}
