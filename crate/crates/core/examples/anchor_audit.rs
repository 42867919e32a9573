//! Per-level anchor counts for every generation mode at 640×640.

use psrpn::anchors::{audit, AnchorMode};

fn main() {
    for mode in [AnchorMode::Window, AnchorMode::Grid3, AnchorMode::Grid5] {
        let a = audit(640, mode, &[4, 8, 16, 32, 64]);
        println!("{}{}\n", a.render(), if a.matches() { "all counts match" } else { "MISMATCH" });
    }
}
