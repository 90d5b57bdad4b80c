// A short periodic-update self-training run on a small slice of the
// reference world, with the PL-quality series and grouped AP.
use ovd_selftrain::harness::{run_seed, ExperimentConfig};
use ovd_selftrain::selftrain::UpdateStrategy;

pub fn run_example() -> ovd_selftrain::Result<Vec<(usize, f64)>> {
    let mut cfg = ExperimentConfig::reference();
    cfg.splits.train = 60;
    cfg.splits.pl_eval = 20;
    cfg.splits.test = 20;
    cfg.trainer.total_iters = 120;
    cfg.trainer.lr_schedule.truncate(1);
    cfg.trainer.strategy = UpdateStrategy::Periodic {
        update_iters: vec![48, 72, 96],
    };
    let run = run_seed(&cfg, 1, None)?;
    for (k, q) in run.history.pl_quality_series() {
        println!("PL quality after {k} updates: {q:.4}");
    }
    let r = &run.report;
    println!(
        "AP50 novel {:.4}, base {:.4}, all {:.4}",
        r.ap50_novel.unwrap_or(f64::NAN),
        r.ap50_base.unwrap_or(f64::NAN),
        r.ap50_all.unwrap_or(f64::NAN)
    );
    Ok(run.history.pl_quality_series())
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
