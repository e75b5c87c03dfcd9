//! Differentiable image ops on `[C, H, W]` tensors (stride-1 convolutions,
//! 2x transposed convolution, 2x2 average pooling, bilinear resize).

use super::{as_2d, reshape_arr, Tensor};
use ndarray::{Array2, Array3, ArrayD, Axis};

fn as_3d(x: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    x.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected [C,H,W] tensor")
}

/// Unfold `[C,H,W]` into `[C*kh*kw, H_out*W_out]` columns (stride 1).
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let h_out = h + 2 * ph + 1 - kh;
    let w_out = w + 2 * pw + 1 - kw;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h_out * w_out));
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                for oy in 0..h_out {
                    let iy = oy as isize + dy as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = ox as isize + dx as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * w_out + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    (cols, h_out, w_out)
}

/// Fold gradient columns back onto the input image (adjoint of `im2col`).
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    h_out: usize,
    w_out: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                for oy in 0..h_out {
                    let iy = oy as isize + dy as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = ox as isize + dx as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * w_out + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 2-D convolution: `x [Ci,H,W]`, `w [Co,Ci,kh,kw]`, optional bias
/// `[Co]`, explicit symmetric padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: (usize, usize)) -> Tensor {
    let xv = as_3d(x.data());
    let ws = w.shape().to_vec();
    assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,kh,kw]");
    let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (xc, xh, xw) = xv.dim();
    assert_eq!(ci, xc, "conv2d channel mismatch");
    let (ph, pw) = pad;

    let (cols, h_out, w_out) = im2col(&xv, kh, kw, ph, pw);
    let w2 = as_2d(&reshape_arr(w.data(), &[co, ci * kh * kw])).to_owned();
    let mut out2 = w2.dot(&cols);
    if let Some(b) = bias {
        let bs = b.data().as_slice().expect("bias contiguous").to_vec();
        assert_eq!(bs.len(), co, "conv2d bias width");
        for o in 0..co {
            let mut row = out2.row_mut(o);
            row += bs[o];
        }
    }
    let out = reshape_arr(&out2.into_dyn(), &[co, h_out, w_out]);

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let xt = x.clone();
    let wt = w.clone();
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g| {
            let g2 = as_2d(&reshape_arr(g, &[co, h_out * w_out])).to_owned();
            let dw = wt.requires_grad().then(|| {
                let dw2 = g2.dot(&cols.t());
                reshape_arr(&dw2.into_dyn(), &[co, ci, kh, kw])
            });
            let dx = xt.requires_grad().then(|| {
                let dcols = w2.t().dot(&g2);
                col2im(&dcols, ci, xh, xw, kh, kw, ph, pw, h_out, w_out)
                    .into_dyn()
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = g2.sum_axis(Axis(1));
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

/// 2x transposed convolution with kernel 2, stride 2 (exact upsampling by
/// a factor of two). Weight layout `[Ci, Co, 2, 2]`.
pub fn deconv2x(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let xv = as_3d(x.data());
    let ws = w.shape().to_vec();
    assert_eq!(ws.len(), 4, "deconv2x weight must be [Ci,Co,2,2]");
    assert_eq!(ws[2], 2);
    assert_eq!(ws[3], 2);
    let (ci, co) = (ws[0], ws[1]);
    let (xc, h, wd) = xv.dim();
    assert_eq!(ci, xc, "deconv2x channel mismatch");

    let x2 = as_2d(&reshape_arr(x.data(), &[ci, h * wd])).to_owned();
    let w2 = as_2d(&reshape_arr(w.data(), &[ci, co * 4])).to_owned();
    let y2 = w2.t().dot(&x2); // [Co*4, H*W]

    let mut out = Array3::<f64>::zeros((co, 2 * h, 2 * wd));
    for o in 0..co {
        for a in 0..2 {
            for b in 0..2 {
                let src = o * 4 + a * 2 + b;
                for i in 0..h {
                    for j in 0..wd {
                        out[(o, 2 * i + a, 2 * j + b)] = y2[(src, i * wd + j)];
                    }
                }
            }
        }
    }
    if let Some(bt) = bias {
        let bs = bt.data().as_slice().expect("bias contiguous").to_vec();
        assert_eq!(bs.len(), co, "deconv2x bias width");
        for o in 0..co {
            out.index_axis_mut(Axis(0), o).mapv_inplace(|v| v + bs[o]);
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let xt = x.clone();
    let wt = w.clone();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |g| {
            let g3 = as_3d(g);
            // Regroup the output gradient into [Co*4, H*W].
            let mut dy2 = Array2::<f64>::zeros((co * 4, h * wd));
            for o in 0..co {
                for a in 0..2 {
                    for b in 0..2 {
                        let dst = o * 4 + a * 2 + b;
                        for i in 0..h {
                            for j in 0..wd {
                                dy2[(dst, i * wd + j)] = g3[(o, 2 * i + a, 2 * j + b)];
                            }
                        }
                    }
                }
            }
            let dx = xt
                .requires_grad()
                .then(|| reshape_arr(&w2.dot(&dy2).into_dyn(), &[ci, h, wd]));
            let dw = wt
                .requires_grad()
                .then(|| reshape_arr(&x2.dot(&dy2.t()).into_dyn(), &[ci, co, 2, 2]));
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = ndarray::Array1::<f64>::zeros(co);
                for o in 0..co {
                    db[o] = g3.index_axis(Axis(0), o).sum();
                }
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

/// 2x2 average pooling with stride 2 on `[C,H,W]`; dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let xv = as_3d(x.data());
    let (c, h, w) = xv.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                out[(ci, i, j)] = 0.25
                    * (xv[(ci, 2 * i, 2 * j)]
                        + xv[(ci, 2 * i, 2 * j + 1)]
                        + xv[(ci, 2 * i + 1, 2 * j)]
                        + xv[(ci, 2 * i + 1, 2 * j + 1)]);
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = as_3d(g);
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = 0.25 * g3[(ci, i, j)];
                        dx[(ci, 2 * i, 2 * j)] += gv;
                        dx[(ci, 2 * i, 2 * j + 1)] += gv;
                        dx[(ci, 2 * i + 1, 2 * j)] += gv;
                        dx[(ci, 2 * i + 1, 2 * j + 1)] += gv;
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Interpolation taps for one axis (half-pixel centers, edges clamped).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[C,h,w]` to `[C,out_h,out_w]`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let xv = as_3d(x.data());
    let (c, h, w) = xv.dim();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                out[(ci, oy, ox)] = (1.0 - fy) * (1.0 - fx) * xv[(ci, y0, x0)]
                    + (1.0 - fy) * fx * xv[(ci, y0, x1)]
                    + fy * (1.0 - fx) * xv[(ci, y1, x0)]
                    + fy * fx * xv[(ci, y1, x1)];
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = as_3d(g);
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g3[(ci, oy, ox)];
                        dx[(ci, y0, x0)] += (1.0 - fy) * (1.0 - fx) * gv;
                        dx[(ci, y0, x1)] += (1.0 - fy) * fx * gv;
                        dx[(ci, y1, x0)] += fy * (1.0 - fx) * gv;
                        dx[(ci, y1, x1)] += fy * fx * gv;
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn num_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[&idx] += h;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm[&idx] -= h;
            let fm = f(&xm);
            g[&idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &ArrayD<f64>, n: &ArrayD<f64>) -> f64 {
        let nd = (a - n).mapv(|v| v * v).sum().sqrt();
        let na = a.mapv(|v| v * v).sum().sqrt();
        let nn = n.mapv(|v| v * v).sum().sqrt();
        nd / na.max(nn).max(1e-12)
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[2, 5, 6], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let out = conv2d(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            Some(&Tensor::constant(b.clone())),
            (1, 1),
        );
        // Naive direct convolution.
        for o in 0..3 {
            for i in 0..5usize {
                for j in 0..6usize {
                    let mut acc = b[[o]];
                    for c in 0..2 {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let iy = i as isize + dy as isize - 1;
                                let ix = j as isize + dx as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 6 {
                                    continue;
                                }
                                acc += x[[c, iy as usize, ix as usize]] * w[[o, c, dy, dx]];
                            }
                        }
                    }
                    assert!((out.data()[[o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[2, 4, 4], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let wt = randn(&[3, 4, 4], &mut rng);

        let lx = Tensor::leaf(x.clone());
        let lw = Tensor::leaf(w.clone());
        let lb = Tensor::leaf(b.clone());
        let loss = conv2d(&lx, &lw, Some(&lb), (1, 1))
            .mul(&Tensor::constant(wt.clone()))
            .sum_all();
        let g = loss.backward();

        let fx = |v: &ArrayD<f64>| {
            (conv2d(
                &Tensor::constant(v.clone()),
                &Tensor::constant(w.clone()),
                Some(&Tensor::constant(b.clone())),
                (1, 1),
            )
            .data()
                * &wt)
                .sum()
        };
        let fw = |v: &ArrayD<f64>| {
            (conv2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(v.clone()),
                Some(&Tensor::constant(b.clone())),
                (1, 1),
            )
            .data()
                * &wt)
                .sum()
        };
        let fb = |v: &ArrayD<f64>| {
            (conv2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(w.clone()),
                Some(&Tensor::constant(v.clone())),
                (1, 1),
            )
            .data()
                * &wt)
                .sum()
        };
        assert!(rel_err(g.get(&lx).unwrap(), &num_grad(&fx, &x, 1e-6)) < 1e-6);
        assert!(rel_err(g.get(&lw).unwrap(), &num_grad(&fw, &w, 1e-6)) < 1e-6);
        assert!(rel_err(g.get(&lb).unwrap(), &num_grad(&fb, &b, 1e-6)) < 1e-6);
    }

    #[test]
    fn deconv2x_doubles_resolution_and_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[3, 4, 5], &mut rng);
        let w = randn(&[3, 2, 2, 2], &mut rng);
        let b = randn(&[2], &mut rng);
        let out = deconv2x(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            Some(&Tensor::constant(b.clone())),
        );
        assert_eq!(out.shape(), &[2, 8, 10]);
        // Spot-check one output block against the definition.
        let mut acc = b[[1]];
        for c in 0..3 {
            acc += x[[c, 1, 2]] * w[[c, 1, 1, 0]];
        }
        assert!((out.data()[[1, 3, 4]] - acc).abs() < 1e-12);

        let wt = randn(&[2, 8, 10], &mut rng);
        let lx = Tensor::leaf(x.clone());
        let lw = Tensor::leaf(w.clone());
        let loss = deconv2x(&lx, &lw, Some(&Tensor::constant(b.clone())))
            .mul(&Tensor::constant(wt.clone()))
            .sum_all();
        let g = loss.backward();
        let fx = |v: &ArrayD<f64>| {
            (deconv2x(
                &Tensor::constant(v.clone()),
                &Tensor::constant(w.clone()),
                Some(&Tensor::constant(b.clone())),
            )
            .data()
                * &wt)
                .sum()
        };
        let fw = |v: &ArrayD<f64>| {
            (deconv2x(
                &Tensor::constant(x.clone()),
                &Tensor::constant(v.clone()),
                Some(&Tensor::constant(b.clone())),
            )
            .data()
                * &wt)
                .sum()
        };
        assert!(rel_err(g.get(&lx).unwrap(), &num_grad(&fx, &x, 1e-6)) < 1e-6);
        assert!(rel_err(g.get(&lw).unwrap(), &num_grad(&fw, &w, 1e-6)) < 1e-6);
    }

    #[test]
    fn avg_pool_and_resize_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[2, 4, 6], &mut rng);
        let wt = randn(&[2, 2, 3], &mut rng);
        let lx = Tensor::leaf(x.clone());
        let loss = avg_pool2(&lx).mul(&Tensor::constant(wt.clone())).sum_all();
        let g = loss.backward();
        let f = |v: &ArrayD<f64>| (avg_pool2(&Tensor::constant(v.clone())).data() * &wt).sum();
        assert!(rel_err(g.get(&lx).unwrap(), &num_grad(&f, &x, 1e-6)) < 1e-6);

        let wt2 = randn(&[2, 7, 9], &mut rng);
        let lx2 = Tensor::leaf(x.clone());
        let loss2 = bilinear_resize(&lx2, 7, 9)
            .mul(&Tensor::constant(wt2.clone()))
            .sum_all();
        let g2 = loss2.backward();
        let f2 = |v: &ArrayD<f64>| {
            (bilinear_resize(&Tensor::constant(v.clone()), 7, 9).data() * &wt2).sum()
        };
        assert!(rel_err(g2.get(&lx2).unwrap(), &num_grad(&f2, &x, 1e-6)) < 1e-6);
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[1, 4, 4], &mut rng);
        let same = bilinear_resize(&Tensor::constant(x.clone()), 4, 4);
        assert!((same.data() - &x).mapv(f64::abs).sum() < 1e-12);

        let flat = ArrayD::from_elem(IxDyn(&[1, 3, 3]), 0.7);
        let up = bilinear_resize(&Tensor::constant(flat), 9, 9);
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }
}
