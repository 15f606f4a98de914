//! Checks every parameter gradient of the three networks against central
//! differences in 64-bit.

use cmdlab::gradcheck::grad_check_all;

fn main() -> cmdlab::Result<()> {
    for (kind, report) in grad_check_all(1e-4)? {
        println!(
            "{:<12} max rel err {:.2e} over {} probes (worst: {})",
            kind.name(),
            report.max_rel_err,
            report.probes,
            report.worst
        );
        for (name, err) in report.per_param.iter().take(4) {
            println!("    {name:<32} {err:.2e}");
        }
    }
    Ok(())
}
