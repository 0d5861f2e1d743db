use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty(), "expected at least one dimension");
    let cols = *shape.last().unwrap();
    let rows = if cols == 0 {
        0
    } else {
        shape.iter().product::<usize>() / cols
    };
    (rows, cols)
}

impl<T: Real> Tensor<T> {
    /// Elementwise map with a derivative expressed through input `x` and
    /// output `y`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.to_vec();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let saved_y = y.clone();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(x.iter().zip(&saved_y))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("add", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("sub", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("mul", self, other);
        let a = self.to_vec();
        let b = other.to_vec();
        let data = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = g.iter().zip(&b).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(&a).map(|(&g, &x)| g * x).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// `self[.., c] + bias[c]` over the last dimension.
    pub fn add_row(&self, bias: &Tensor<T>) -> Tensor<T> {
        let (rows, cols) = rows_cols(self.shape());
        assert_eq!(bias.shape(), &[cols], "add_row: bias shape");
        let b = bias.to_vec();
        let data = self
            .data()
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(&b).map(|(&x, &y)| x + y).collect::<Vec<_>>())
            .collect();
        Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        )
    }

    /// `self[.., c] * factor[c]` over the last dimension.
    pub fn mul_row(&self, factor: &Tensor<T>) -> Tensor<T> {
        let (rows, cols) = rows_cols(self.shape());
        assert_eq!(factor.shape(), &[cols], "mul_row: factor shape");
        let x = self.to_vec();
        let f = factor.to_vec();
        let data = x
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(&f).map(|(&a, &b)| a * b).collect::<Vec<_>>())
            .collect();
        Tensor::from_op(
            "mul_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), factor.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); rows * cols];
                let mut df = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        dx[i] = g[i] * f[c];
                        df[c] += g[i] * x[i];
                    }
                }
                vec![Some(dx), Some(df)]
            }),
        )
    }

    /// 2-D matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2-D");
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension {k} vs {k2}");
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        Tensor::from_op(
            "matmul",
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = need_a.then(|| {
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    da
                });
                let db = need_b.then(|| {
                    let mut db = vec![T::zero(); k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn elu(&self) -> Tensor<T> {
        self.unary(
            "elu",
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// `[n, c] -> [c]`, averaging over rows.
    pub fn mean_rows(&self) -> Tensor<T> {
        let (rows, cols) = rows_cols(self.shape());
        assert!(rows > 0, "mean_rows over zero rows");
        let inv = T::one() / T::of(rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in self.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::from_op(
            "mean_rows",
            vec![cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor<T> {
        let (rows, cols) = rows_cols(self.shape());
        assert!(start <= end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let w = end - start;
        let data: Vec<T> = self
            .data()
            .chunks(cols.max(1))
            .flat_map(|r| r[start..end].to_vec())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Tensor::from_op(
            "slice_cols",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(&s[..s.len() - 1], lead, "concat_cols leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (d, &w) in datas.iter().zip(&widths) {
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_op(
            "concat_cols",
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g| {
                let mut out: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in out.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        )
    }

    /// Concatenates along the first dimension; trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tail = parts[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(&p.shape()[1..], &tail[..], "concat_rows trailing dims");
                lead += p.shape()[0];
                data.extend_from_slice(&p.data());
                p.numel()
            })
            .collect();
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Tensor::from_op(
            "concat_rows",
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let v = g[off..off + n].to_vec();
                        off += n;
                        Some(v)
                    })
                    .collect()
            }),
        )
    }

    /// Selects rows (first dimension) by index; repeats are allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor<T> {
        let n = self.shape()[0];
        let row = if n == 0 { 0 } else { self.numel() / n };
        let src = self.data();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            assert!(i < n, "gather_rows index {i} out of {n}");
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let index = index.to_vec();
        let total = self.numel();
        Tensor::from_op(
            "gather_rows",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); total];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..row {
                        dx[i * row + c] += g[k * row + c];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `[c] -> [n, c]` by repeating the vector.
    pub fn broadcast_rows(&self, n: usize) -> Tensor<T> {
        assert_eq!(self.shape().len(), 1, "broadcast_rows expects a vector");
        let c = self.numel();
        let v = self.to_vec();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&v);
        }
        Tensor::from_op(
            "broadcast_rows",
            vec![n, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![T::zero(); c];
                for r in g.chunks(c.max(1)) {
                    for (a, &b) in d.iter_mut().zip(r) {
                        *a += b;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let (_, cols) = rows_cols(self.shape());
        let mut y = self.to_vec();
        for r in y.chunks_mut(cols.max(1)) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        let saved = y.clone();
        Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); saved.len()];
                for ((dr, yr), gr) in dx
                    .chunks_mut(cols.max(1))
                    .zip(saved.chunks(cols.max(1)))
                    .zip(g.chunks(cols.max(1)))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scales each row (last dimension) to unit length.
    ///
    /// Rows already unit length within a few ulps are passed through
    /// unchanged, which makes the operation idempotent bit-for-bit. The
    /// derivative is the projection `(I - n n^T) / |x|` in every case.
    pub fn normalize_rows(&self) -> Tensor<T> {
        let (_, cols) = rows_cols(self.shape());
        let x = self.to_vec();
        let tol = T::epsilon() * T::of(8.0);
        let mut norms = Vec::with_capacity(x.len() / cols.max(1));
        let mut y = x.clone();
        for r in y.chunks_mut(cols.max(1)) {
            let sq: T = r.iter().map(|&v| v * v).sum();
            let n = sq.sqrt();
            norms.push(n);
            if (sq - T::one()).abs() > tol {
                for v in r.iter_mut() {
                    *v /= n;
                }
            }
        }
        let saved = y.clone();
        Tensor::from_op(
            "normalize_rows",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); saved.len()];
                for (((dr, yr), gr), &n) in dx
                    .chunks_mut(cols.max(1))
                    .zip(saved.chunks(cols.max(1)))
                    .zip(g.chunks(cols.max(1)))
                    .zip(&norms)
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng, training: bool) -> Tensor<T> {
        if !training || rate <= 0.0 {
            return self.clone();
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Graph-attention coefficients.
///
/// For every node `i` the scores `LeakyReLU(src[i] + dst[p])` over its
/// neighbourhood `neighbors[i]` are softmax-normalised; the result is a dense
/// `[m, m]` matrix that is zero outside each neighbourhood. Neighbourhoods
/// must be non-empty.
pub fn masked_attention<T: Real>(
    src: &Tensor<T>,
    dst: &Tensor<T>,
    neighbors: &[Vec<usize>],
    slope: T,
) -> Tensor<T> {
    let m = neighbors.len();
    assert_eq!(src.numel(), m, "masked_attention: src size");
    assert_eq!(dst.numel(), m, "masked_attention: dst size");
    let s = src.to_vec();
    let d = dst.to_vec();
    let mut alpha = vec![T::zero(); m * m];
    let mut leaky_slope = vec![T::one(); m * m];
    for (i, nb) in neighbors.iter().enumerate() {
        assert!(!nb.is_empty(), "node {i} has an empty neighbourhood");
        let mut mx = T::neg_infinity();
        for &p in nb {
            let e = s[i] + d[p];
            let (e, sl) = if e > T::zero() { (e, T::one()) } else { (slope * e, slope) };
            alpha[i * m + p] = e;
            leaky_slope[i * m + p] = sl;
            mx = mx.max(e);
        }
        let mut sum = T::zero();
        for &p in nb {
            let v = (alpha[i * m + p] - mx).exp();
            alpha[i * m + p] = v;
            sum += v;
        }
        for &p in nb {
            alpha[i * m + p] /= sum;
        }
    }
    let saved = alpha.clone();
    let nbs = neighbors.to_vec();
    Tensor::from_op(
        "masked_attention",
        vec![m, m],
        alpha,
        vec![src.clone(), dst.clone()],
        Box::new(move |g| {
            let mut ds = vec![T::zero(); m];
            let mut dd = vec![T::zero(); m];
            for (i, nb) in nbs.iter().enumerate() {
                let dot: T = nb.iter().map(|&p| saved[i * m + p] * g[i * m + p]).sum();
                for &p in nb {
                    let de = saved[i * m + p] * (g[i * m + p] - dot) * leaky_slope[i * m + p];
                    ds[i] += de;
                    dd[p] += de;
                }
            }
            vec![Some(ds), Some(dd)]
        }),
    )
}
