//! Verifies the hand-written backward pass of every variant against
//! central finite differences.

use mqa::gradcheck::{gradient_check, GradCheckConfig};
use mqa::Variant;

fn main() -> mqa::Result<()> {
    let mut ok = true;
    for v in Variant::ALL {
        let report = gradient_check(&GradCheckConfig::tiny(v))?;
        println!("{report}\n");
        ok &= report.passed();
    }
    std::process::exit(if ok { 0 } else { 1 });
}
