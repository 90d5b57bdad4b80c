// Exports the initial teacher's PLs to JSONL and trains a fresh student
// on that file alone.
use ovd_selftrain::harness::{export_teacher_pls, retrain_from_pls, ExperimentConfig};
use ovd_selftrain::heads::DetectorParams;
use ovd_selftrain::selftrain::Phase;

pub fn run_example() -> ovd_selftrain::Result<(usize, f64)> {
    let mut cfg = ExperimentConfig::reference();
    cfg.splits.train = 40;
    cfg.splits.pl_eval = 10;
    cfg.splits.test = 20;
    cfg.trainer.total_iters = 80;
    cfg.trainer.lr_schedule.truncate(1);
    cfg.trainer.strategy = ovd_selftrain::selftrain::UpdateStrategy::NoUpdate;

    let teacher = DetectorParams::init(cfg.world.dim);
    let table = export_teacher_pls(&cfg, &teacher, 1, Phase::PreFirstUpdate)?;
    let path = std::env::temp_dir().join(format!("ovd_external_pls_{}.jsonl", std::process::id()));
    table.save(&path)?;
    println!("{} PLs written to {}", table.len(), path.display());

    let run = retrain_from_pls(&cfg, &path, 1)?;
    std::fs::remove_file(&path).ok();
    let novel = run.report.ap50_novel.unwrap_or(0.0);
    println!("student trained on the file: AP50 novel {novel:.4}");
    Ok((table.len(), novel))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
