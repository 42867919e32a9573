//! Parameter counts of the six head variants on the full-size model.

use psrpn::heads::{head_param_table, HeadConfig};

fn main() {
    let table = head_param_table(&HeadConfig::default());
    print!("{}", table.render());
    println!("\ncsv:\n{}", table.to_csv());
}
