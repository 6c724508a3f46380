use crate::error::{Error, Result};
use crate::tensorgrid::{FeatureBatch, Shape4};

pub fn relu_forward(x: &FeatureBatch) -> FeatureBatch {
    let mut y = x.clone();
    y.map_inplace(|v| v.max(0.0));
    y
}

/// `output` is the forward result; the derivative at 0 is taken as 0.
pub fn relu_backward(output: &FeatureBatch, grad_out: &FeatureBatch) -> FeatureBatch {
    assert_eq!(output.shape(), grad_out.shape());
    let mut g = grad_out.clone();
    for (gv, y) in g.data_mut().iter_mut().zip(output.data()) {
        if *y <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
pub fn upsample2_forward(x: &FeatureBatch) -> FeatureBatch {
    let s = x.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let mut out = FeatureBatch::zeros(s.n, s.c, oh, ow);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let start = (n * s.c + c) * oh * ow;
            let dst = &mut out.data_mut()[start..start + oh * ow];
            for y in 0..oh {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                for (xx, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *d = row[xx / 2];
                }
            }
        }
    }
    out
}

/// Sums the gradient over every 2x2 replication block.
pub fn upsample2_backward(grad_out: &FeatureBatch) -> FeatureBatch {
    let s = grad_out.shape();
    assert!(s.h % 2 == 0 && s.w % 2 == 0, "upsample2 gradient must have even dims");
    let (h, w) = (s.h / 2, s.w / 2);
    let mut out = FeatureBatch::zeros(s.n, s.c, h, w);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            for y in 0..h {
                for x in 0..w {
                    let v = g[2 * y * s.w + 2 * x]
                        + g[2 * y * s.w + 2 * x + 1]
                        + g[(2 * y + 1) * s.w + 2 * x]
                        + g[(2 * y + 1) * s.w + 2 * x + 1];
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

fn check_same(pred: &FeatureBatch, target: &FeatureBatch) -> Result<Shape4> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse between {} and {}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.shape())
}

/// Mean over all elements of the squared difference.
pub fn mse_forward(pred: &FeatureBatch, target: &FeatureBatch) -> Result<f64> {
    let s = check_same(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / s.len() as f64)
}

pub fn mse_backward(pred: &FeatureBatch, target: &FeatureBatch) -> Result<FeatureBatch> {
    let s = check_same(pred, target)?;
    let k = 2.0 / s.len() as f64;
    let data = pred.data().iter().zip(target.data()).map(|(p, t)| k * (p - t)).collect();
    FeatureBatch::from_vec(s, data)
}
