// Runs the RPN-fusion preset on one seed and prints its trend check.
use ovd_selftrain::harness::{run_ablation, TrendReport};

pub fn run_example() -> ovd_selftrain::Result<TrendReport> {
    let report = run_ablation("rpn_fusion", Some(&[1]))?;
    print!("{}", report.summary_csv());
    for a in &report.assertions {
        println!("{} -> {}", a.description, if a.passed { "holds" } else { "violated" });
    }
    Ok(report)
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
