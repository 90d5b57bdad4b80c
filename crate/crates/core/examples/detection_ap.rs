// All-point AP50 for one class on a ranked list with a duplicate, then a
// branch-by-branch evaluation of the untrained detector.
use ovd_selftrain::eval::{average_precision, evaluate_detector, BranchMode, EvalOptions, SceneBox, SceneDetection, AP_IOU};
use ovd_selftrain::geometry::{BoundingBox, Detection};
use ovd_selftrain::harness::{ExperimentConfig, Prepared};
use ovd_selftrain::heads::DetectorParams;

pub fn run_example() -> ovd_selftrain::Result<(f64, Vec<f64>)> {
    let g1 = BoundingBox::new(0.1, 0.1, 0.3, 0.3)?;
    let g2 = BoundingBox::new(0.6, 0.6, 0.8, 0.8)?;
    let gts = [SceneBox { scene_id: 0, bbox: g1 }, SceneBox { scene_id: 0, bbox: g2 }];
    let det = |b, s| SceneDetection { scene_id: 0, det: Detection::new(b, 0, s).unwrap() };
    // TP, duplicate FP, TP
    let dets = [det(g1, 0.9), det(g1, 0.8), det(g2, 0.7)];
    let ap = average_precision(&dets, &gts, AP_IOU);
    println!("hand-built AP50 = {ap:.4}");

    let mut cfg = ExperimentConfig::reference();
    cfg.splits.train = 1;
    cfg.splits.pl_eval = 1;
    cfg.splits.test = 30;
    let prep = Prepared::new(&cfg)?;
    let params = DetectorParams::init(prep.space.dim());
    let mut novel = Vec::new();
    for mode in [BranchMode::OpenOnly, BranchMode::ClosedOnly, BranchMode::Fused] {
        let opts = EvalOptions { branch_mode: mode, ..cfg.eval.clone() };
        let r = evaluate_detector(&params, &prep.test, &prep.space, &opts)?;
        println!("{mode:?}: novel {:.4} base {:.4}", r.ap50_novel.unwrap_or(0.0), r.ap50_base.unwrap_or(0.0));
        novel.push(r.ap50_novel.unwrap_or(0.0));
    }
    Ok((ap, novel))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
