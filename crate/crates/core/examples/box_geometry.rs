//! Box utilities: IoU, delta encoding and decoding, and class-wise NMS.

use uodlab::geometry::{iou, nms, BoxCoder, BoxXYXY, ScoredBox};

fn main() -> uodlab::Result<()> {
    let a = BoxXYXY::new(10.0, 10.0, 30.0, 30.0)?;
    let b = BoxXYXY::new(20.0, 20.0, 40.0, 40.0)?;
    println!("IoU({a:?}, {b:?}) = {:.4}", iou(&a, &b));

    let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
    let d = coder.encode(&a, &b);
    println!("deltas from a to b: {d:?}");
    println!("decoded back: {:?}", coder.decode(&a, &d));

    let dets = vec![
        ScoredBox::new(a, 0, 0.9)?,
        ScoredBox::new(BoxXYXY::new(11.0, 11.0, 31.0, 31.0)?, 0, 0.8)?,
        ScoredBox::new(BoxXYXY::new(11.0, 11.0, 31.0, 31.0)?, 1, 0.7)?,
        ScoredBox::new(b, 0, 0.6)?,
    ];
    let keep = nms(&dets, 0.5);
    println!("NMS at 0.5 keeps indices {keep:?}");
    Ok(())
}
