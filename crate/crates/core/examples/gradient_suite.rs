//! Finite-difference checks of every op, block and head. Pass a seed count
//! and an optional name filter: `gradient_suite 3 conv`.

use psrpn::gradsuite::{render_suite, run_suite, suite_config};

fn main() -> psrpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let filter = args.next();
    let entries = run_suite(seeds, &suite_config(), filter.as_deref())?;
    print!("{}", render_suite(&entries));
    Ok(())
}
