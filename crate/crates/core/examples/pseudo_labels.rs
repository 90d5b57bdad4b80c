// The initial teacher labels one reference scene; proposals are then
// routed to the open and closed batches.
use ovd_selftrain::harness::{ExperimentConfig, Prepared};
use ovd_selftrain::heads::{DetectorParams, Source};
use ovd_selftrain::selftrain::{generate_pls, match_proposals, Phase};

pub fn run_example() -> ovd_selftrain::Result<(usize, usize, usize)> {
    let mut cfg = ExperimentConfig::reference();
    cfg.splits.train = 8;
    cfg.splits.pl_eval = 1;
    cfg.splits.test = 1;
    let prep = Prepared::new(&cfg)?;
    let teacher = DetectorParams::init(prep.space.dim());

    let (scene, regions) = (&prep.train.scenes[0], &prep.train.regions[0]);
    let pls = generate_pls(&teacher, regions, &prep.space, &cfg.trainer, Phase::PreFirstUpdate)?;
    for p in &pls {
        println!("PL class {} score {:.3} box {:?}", p.class_id, p.score, p.bbox.to_array());
    }
    let base: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| prep.space.is_base(o.class_id))
        .copied()
        .collect();
    let m = match_proposals(regions, &base, &pls, cfg.trainer.fg_iou, cfg.trainer.bg_iou, &prep.space);
    println!(
        "open batch: {} GT, {} PL, {} BG; closed batch: {} entries",
        m.open.count(Source::Gt),
        m.open.count(Source::Pl),
        m.open.count(Source::Bg),
        m.closed.len()
    );
    Ok((pls.len(), m.open.count(Source::Pl), m.closed.count(Source::Pl)))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
