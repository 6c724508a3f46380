// PCK and the simplified similarity-threshold mAP on a two-keypoint case.

use mumkit::ssltrain::{figure_scale, keypoint_similarity, MetricAccumulator};

fn main() -> mumkit::Result<()> {
    let gt = [(10.0, 10.0), (40.0, 50.0)];
    let vis = [true, true];
    let pred = [(10.0, 13.0), (40.0, 58.0)];
    let s = figure_scale(&gt, &vis);
    for (p, g) in pred.iter().zip(&gt) {
        let d = ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
        println!("distance {d:.1} px, similarity {:.3}", keypoint_similarity(d, s));
    }
    let mut acc = MetricAccumulator::default();
    acc.add(&pred, &gt, &vis, (48, 64));
    let r = acc.finish();
    println!("pck@0.1 {}  pck@0.2 {}  map {:.3}", r.pck01, r.pck02, r.map);

    let mut perfect = MetricAccumulator::default();
    perfect.add(&gt, &gt, &vis, (48, 64));
    println!("perfect predictions: {:?}", perfect.finish());
    Ok(())
}
