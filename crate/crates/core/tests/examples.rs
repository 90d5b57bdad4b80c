macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(box_geometry);
example!(cosine_classifier);
example!(synthetic_world);
example!(branch_losses);
example!(pseudo_labels);
example!(self_training);
example!(detection_ap);
example!(ablation_preset);
example!(external_pls);

#[test]
fn box_geometry_runs() {
    let (overlap, hard, soft) = box_geometry::run_example().unwrap();
    assert!((overlap - 0.04 / 0.28).abs() < 1e-12);
    assert_eq!(hard, 3);
    assert!(soft >= hard);
}

#[test]
fn cosine_classifier_runs() {
    let (p, fused) = cosine_classifier::run_example().unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(p.len(), 4);
    assert_eq!(fused.len(), 4);
}

#[test]
fn synthetic_world_runs() {
    let (objects, proposals) = synthetic_world::run_example().unwrap();
    assert!((2..=5).contains(&objects));
    assert!(proposals >= objects);
}

#[test]
fn branch_losses_run() {
    let (start, end) = branch_losses::run_example().unwrap();
    assert!(end < start);
}

#[test]
fn pseudo_labels_run() {
    let (_, _, closed_pls) = pseudo_labels::run_example().unwrap();
    assert_eq!(closed_pls, 0);
}

#[test]
fn self_training_runs() {
    let series = self_training::run_example().unwrap();
    assert_eq!(series.len(), 4);
    assert!(series.iter().all(|(_, q)| (0.0..=1.0).contains(q)));
}

#[test]
fn detection_ap_runs() {
    let (ap, novel) = detection_ap::run_example().unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert_eq!(novel.len(), 3);
}

#[test]
fn ablation_preset_runs() {
    let report = ablation_preset::run_example().unwrap();
    assert_eq!(report.variant_order, vec!["initial_phase", "never"]);
    assert_eq!(report.assertions.len(), 1);
}

#[test]
fn external_pls_run() {
    let (n, novel) = external_pls::run_example().unwrap();
    assert!(n > 0);
    assert!((0.0..=1.0).contains(&novel));
}
