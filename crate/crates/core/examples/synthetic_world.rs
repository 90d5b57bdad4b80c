// Builds the reference world, samples a scene with its proposals and
// region features, and exports a few scenes as JSONL.
use ovd_selftrain::harness::ExperimentConfig;
use ovd_selftrain::synthworld::{gen_category_space, Dataset, RegionSet};

pub fn run_example() -> ovd_selftrain::Result<(usize, usize)> {
    let cfg = ExperimentConfig::reference().world;
    let space = gen_category_space(&cfg)?;
    println!("{} base + {} novel categories in {} dims", cfg.n_base, cfg.n_novel, space.dim());

    let ds = Dataset::generate(&space, &cfg, 0..3);
    let scene = &ds.scenes[0];
    let regions = RegionSet::for_scene(scene, &space, &cfg);
    for o in &scene.objects {
        println!("object class {} at {:?}", o.class_id, o.bbox.to_array());
    }
    for p in regions.proposals.iter().take(4) {
        println!("proposal {:?} objectness {:.2}", p.bbox.to_array(), p.objectness);
    }

    let mut jsonl = Vec::new();
    ds.write_jsonl(&mut jsonl).expect("in-memory write");
    println!("{}", String::from_utf8_lossy(&jsonl).lines().next().unwrap_or(""));
    Ok((scene.objects.len(), regions.len()))
}

fn main() -> ovd_selftrain::Result<()> {
    run_example().map(|_| ())
}
