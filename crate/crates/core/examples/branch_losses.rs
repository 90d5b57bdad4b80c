// Open- and closed-branch losses on a hand-built batch, followed by a few
// SGD steps. The closed branch never sees the pseudo-labelled entry.
use ovd_selftrain::embedspace::CategorySpace;
use ovd_selftrain::geometry::BoxDeltas;
use ovd_selftrain::heads::{
    closed_branch_loss, open_branch_loss, sgd_step, DetectorParams, MatchedBatch, MatchedEntry,
};

pub fn run_example() -> ovd_selftrain::Result<(f64, f64)> {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let space = CategorySpace::new(vec![e(0), e(1), e(2)], vec![0, 1], vec![2], 0.1)?;
    let gt = MatchedEntry::gt(vec![0.8, 0.5, 0.1, 0.3], 0, BoxDeltas::new(0.1, -0.05, 0.0, 0.2));
    let pl = MatchedEntry::pl(vec![0.1, 0.2, 0.9, 0.3], 2);
    let bg = MatchedEntry::bg(vec![0.1, 0.1, 0.1, 0.9], space.background_id());
    let open = MatchedBatch {
        entries: vec![gt.clone(), pl, bg.clone()],
    };
    let closed = MatchedBatch { entries: vec![gt, bg] };

    let mut p = DetectorParams::init(4);
    let start = open_branch_loss(&open, &p, &space)?.0 + closed_branch_loss(&closed, &p, &space)?.0;
    for it in 0..50 {
        let (_, go) = open_branch_loss(&open, &p, &space)?;
        let (_, gc) = closed_branch_loss(&closed, &p, &space)?;
        p = sgd_step(&p, &go.merge(gc), 0.05, it)?;
    }
    let end = open_branch_loss(&open, &p, &space)?.0 + closed_branch_loss(&closed, &p, &space)?.0;
    println!("total loss {start:.4} -> {end:.4}");
    Ok((start, end))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
