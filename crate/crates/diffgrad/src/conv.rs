use crate::real::Real;
use crate::tensor::Tensor;

/// Stride-1 3x3 convolution with zero padding on an `[h, w, c_in]` image.
///
/// `weight` is laid out `[3, 3, c_in, c_out]` and `bias` is `[c_out]`; the
/// output has shape `[h, w, c_out]`.
pub fn conv2d_3x3<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let &[h, w, cin] = input.shape() else {
        panic!("conv2d_3x3 input must be [h, w, c], got {:?}", input.shape());
    };
    let &[kh, kw, wcin, cout] = weight.shape() else {
        panic!("conv2d_3x3 weight must be [3, 3, c_in, c_out], got {:?}", weight.shape());
    };
    assert_eq!((kh, kw, wcin), (3, 3, cin), "conv2d_3x3 weight shape");
    assert_eq!(bias.shape(), &[cout], "conv2d_3x3 bias shape");

    let x = input.to_vec();
    let wt = weight.to_vec();
    let b = bias.to_vec();
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(&b);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let px = &x[(sy as usize * w + sx as usize) * cin..][..cin];
                    let taps = &wt[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        let row = &taps[ci * cout..(ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(row) {
                            *ov += v * wv;
                        }
                    }
                }
            }
        }
    }

    let need_input = input.requires_grad();
    let need_weight = weight.requires_grad();
    Tensor::from_op(
        "conv2d_3x3",
        vec![h, w, cout],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let mut db = vec![T::zero(); cout];
            for px in g.chunks(cout) {
                for (d, &v) in db.iter_mut().zip(px) {
                    *d += v;
                }
            }
            let mut dw = need_weight.then(|| vec![T::zero(); 9 * cin * cout]);
            let mut dx = need_input.then(|| vec![T::zero(); h * w * cin]);
            // Weights as [tap, c_out, c_in] so the input gradient is a run of
            // contiguous multiply-adds.
            let wt_t: Vec<T> = if need_input {
                let mut t = vec![T::zero(); 9 * cin * cout];
                for tap in 0..9 {
                    for ci in 0..cin {
                        for co in 0..cout {
                            t[tap * cin * cout + co * cin + ci] = wt[tap * cin * cout + ci * cout + co];
                        }
                    }
                }
                t
            } else {
                Vec::new()
            };
            for y in 0..h {
                for xx in 0..w {
                    let gp = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                    if gp.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * cin;
                            let tap = (ky * 3 + kx) * cin * cout;
                            if let Some(dw) = dw.as_mut() {
                                let px = &x[src..src + cin];
                                for (ci, &v) in px.iter().enumerate() {
                                    if v == T::zero() {
                                        continue;
                                    }
                                    let row = &mut dw[tap + ci * cout..tap + (ci + 1) * cout];
                                    for (d, &gv) in row.iter_mut().zip(gp) {
                                        *d += v * gv;
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let out = &mut dx[src..src + cin];
                                for (co, &gv) in gp.iter().enumerate() {
                                    if gv == T::zero() {
                                        continue;
                                    }
                                    let row = &wt_t[tap + co * cin..tap + (co + 1) * cin];
                                    for (d, &wv) in out.iter_mut().zip(row) {
                                        *d += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw, Some(db)]
        }),
    )
}
