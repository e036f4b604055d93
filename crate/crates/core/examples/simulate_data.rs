//! Draw one dataset from a built-in scenario and print it as a count file.
//!
//! cargo run --example simulate_data -- nonmonotone-3 2000 7 > counts.csv

use psace::cli::write_counts;
use psace::simulation::{builtin_scenario, generate_dataset};

fn main() -> psace::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map_or("nonmonotone-3", String::as_str);
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let scenario = builtin_scenario(name)?.with_n(n);
    let counts = generate_dataset(&scenario, seed)?;
    write_counts(&counts, std::io::stdout().lock())
}
