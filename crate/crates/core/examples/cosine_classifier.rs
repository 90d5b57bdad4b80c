// Temperature-scaled cosine classifier with a constant background logit,
// and geometric-mean fusion of two branch outputs.
use ovd_selftrain::embedspace::{classify, fuse_scores, CategorySpace};

pub fn run_example() -> ovd_selftrain::Result<(Vec<f64>, Vec<f64>)> {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    // two base categories, one novel
    let space = CategorySpace::new(vec![e(0), e(1), e(2)], vec![0, 1], vec![2], 0.2)?;
    let region = vec![0.2, 0.1, 0.9, 0.1];
    let p = classify(&region, &space)?;
    println!("probs (last is background): {:?}", p.as_slice());

    let closed = classify(&[0.9, 0.1, 0.2, 0.1], &space)?;
    let fused = fuse_scores(&p, &closed, 1.0 / 3.0, &space);
    println!("fused: {:?}", fused.as_slice());
    Ok((p.as_slice().to_vec(), fused.as_slice().to_vec()))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
