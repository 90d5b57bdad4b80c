// IoU, delta encoding and both suppression flavours on a handful of boxes.
use ovd_selftrain::geometry::{apply_deltas, encode_deltas, iou, nms, soft_nms, BoundingBox, Detection};

pub fn run_example() -> ovd_selftrain::Result<(f64, usize, usize)> {
    let a = BoundingBox::new(0.1, 0.1, 0.5, 0.5)?;
    let b = BoundingBox::new(0.3, 0.3, 0.7, 0.7)?;
    let overlap = iou(&a, &b);
    println!("iou = {overlap:.4}");

    let d = encode_deltas(&a, &b);
    let back = apply_deltas(&a, &d);
    println!("deltas {:?} map a onto {:?}", d.to_array(), back.to_array());

    let dets = vec![
        Detection::new(a, 0, 0.9)?,
        Detection::new(BoundingBox::new(0.12, 0.1, 0.52, 0.5)?, 0, 0.8)?,
        Detection::new(b, 0, 0.7)?,
        Detection::new(a, 1, 0.6)?,
    ];
    let hard = nms(&dets, 0.5);
    let soft = soft_nms(&dets, 0.5, 0.3);
    for d in &soft {
        println!("soft-nms keeps class {} at {:.3}", d.class_id, d.score);
    }
    Ok((overlap, hard.len(), soft.len()))
}

fn main() -> ovd_selftrain::Result<()> {
    let (overlap, hard, soft) = run_example()?;
    println!("iou {overlap:.4}, hard nms kept {hard}, soft nms kept {soft}");
    Ok(())
}
