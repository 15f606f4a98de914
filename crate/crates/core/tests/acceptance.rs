//! One line per acceptance criterion; exits nonzero if any fails.
//!
//! `CMDLAB_ACCEPT=A1,A5` restricts the run to the listed criteria.

use std::process::ExitCode;

use cmdlab::verify::{checks, format_row};

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("CMDLAB_ACCEPT")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    // libtest flags such as --nocapture arrive here too; a filter argument
    // that is not a flag selects criteria by id
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for check in checks() {
        let wanted = only.as_ref().is_none_or(|o| o.iter().any(|id| id == check.id))
            && (filters.is_empty() || filters.iter().any(|f| f.eq_ignore_ascii_case(check.id)));
        if !wanted {
            continue;
        }
        let r = check.run();
        println!("{}", format_row(&r));
        ran += 1;
        if !r.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
