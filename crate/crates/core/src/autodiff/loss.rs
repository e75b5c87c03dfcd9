//! Scalar loss ops with numerically stable forward passes and closed-form
//! backward passes.

use super::{stable_sigmoid, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};

/// Mean binary cross-entropy over all elements, computed from logits with
/// the log-sum-exp stable form. `target` entries must be 0.0 or 1.0.
pub fn bce_with_logits_mean(logits: &Tensor, target: &ArrayD<f64>) -> Tensor {
    assert_eq!(logits.shape(), target.shape(), "bce target shape mismatch");
    let n = target.len() as f64;
    let mut total = 0.0;
    for (&x, &y) in logits.data().iter().zip(target.iter()) {
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    let target = target.clone();
    let lt = logits.clone();
    Tensor::from_op(
        ndarray::arr0(total / n).into_dyn(),
        vec![logits.clone()],
        Box::new(move |g| {
            let gs = *g.iter().next().unwrap();
            let mut dx = ArrayD::<f64>::zeros(IxDyn(lt.shape()));
            for ((d, &x), &y) in dx.iter_mut().zip(lt.data().iter()).zip(target.iter()) {
                *d = gs * (stable_sigmoid(x) - y) / n;
            }
            vec![Some(dx)]
        }),
    )
}

/// Mean softmax cross-entropy over pixels whose label differs from
/// `ignore`, for logits shaped `[C,H,W]`. Returns the scalar loss tensor
/// and the number of contributing pixels (0 means every pixel was
/// ignored and the loss is a constant zero).
pub fn softmax_ce_ignore_mean(
    logits: &Tensor,
    labels: &Array2<u8>,
    ignore: u8,
) -> (Tensor, usize) {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 3, "expected [C,H,W] logits");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(labels.dim(), (h, w), "label map shape mismatch");

    let count = labels.iter().filter(|&&y| y != ignore).count();
    if count == 0 {
        return (Tensor::constant(ndarray::arr0(0.0).into_dyn()), 0);
    }

    let x = logits.data();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let y = labels[(i, j)];
            if y == ignore {
                continue;
            }
            let mut maxv = f64::NEG_INFINITY;
            for k in 0..c {
                maxv = maxv.max(x[[k, i, j]]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                sum += (x[[k, i, j]] - maxv).exp();
            }
            total += maxv + sum.ln() - x[[y as usize, i, j]];
        }
    }

    let labels = labels.clone();
    let lt = logits.clone();
    let loss = Tensor::from_op(
        ndarray::arr0(total / count as f64).into_dyn(),
        vec![logits.clone()],
        Box::new(move |g| {
            let gs = *g.iter().next().unwrap() / count as f64;
            let x = lt.data();
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for i in 0..h {
                for j in 0..w {
                    let y = labels[(i, j)];
                    if y == ignore {
                        continue;
                    }
                    let mut maxv = f64::NEG_INFINITY;
                    for k in 0..c {
                        maxv = maxv.max(x[[k, i, j]]);
                    }
                    let mut sum = 0.0;
                    for k in 0..c {
                        sum += (x[[k, i, j]] - maxv).exp();
                    }
                    for k in 0..c {
                        let p = (x[[k, i, j]] - maxv).exp() / sum;
                        let t = (k == y as usize) as u8 as f64;
                        dx[[k, i, j]] = gs * (p - t);
                    }
                }
            }
            vec![Some(dx)]
        }),
    );
    (loss, count)
}
