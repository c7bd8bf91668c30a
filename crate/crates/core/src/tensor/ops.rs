use std::rc::Rc;

use super::gemm::{gemm_acc, MatRef};
use super::{Tensor, Var};
use crate::error::{Error, Result};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Sampling coordinates within this distance (in cells) of a knot snap to it,
/// so a reference grid reproduces the feature map exactly.
const KNOT_SNAP: f64 = 1e-9;

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.push(
            op,
            y,
            &[self],
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let y = Rc::new(zip_map(&a, &b, |x, y| x + y));
        self.tape.push(
            "add",
            y,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let y = Rc::new(zip_map(&a, &b, |x, y| x - y));
        self.tape.push(
            "sub",
            y,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let y = Rc::new(zip_map(&a, &b, |x, y| x * y));
        self.tape.push(
            "mul",
            y,
            &[self, other],
            Box::new(move |g| vec![Some(zip_map(g, &b, |g, b| g * b)), Some(zip_map(g, &a, |g, a| g * a))]),
        )
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Scaled exponential linear unit with the self-normalizing constants.
    pub fn selu(self) -> Result<Var<'t>> {
        self.unary(
            "selu",
            |x| {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            },
            |x, _| {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// Adds a vector along the last axis (row-wise bias).
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap_or(&1);
        if b.shape() != [n] {
            return Err(dim_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let data = x
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(v, c)| v + c))
            .collect();
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), data));
        self.tape.push(
            "add_bias",
            y,
            &[self, bias],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![n], gb))]
            }),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(dim_err(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(dim_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, MatRef::rows(a.data(), k), MatRef::rows(b.data(), n), &mut out);
        let y = Rc::new(Tensor::from_parts(vec![m, n], out));
        self.tape.push(
            "matmul",
            y,
            &[self, other],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                gemm_acc(m, n, k, MatRef::rows(g.data(), n), MatRef::transposed(b.data(), n), &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm_acc(k, m, n, MatRef::transposed(a.data(), k), MatRef::rows(g.data(), n), &mut gb);
                vec![
                    Some(Tensor::from_parts(vec![m, k], ga)),
                    Some(Tensor::from_parts(vec![k, n], gb)),
                ]
            }),
        )
    }

    /// Batched product of `[g, m, k]` and `[g, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[ga, m, k], &[gb, k2, n]) = (a.shape(), b.shape()) else {
            return Err(dim_err(format!(
                "bmm needs rank-3 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if ga != gb || k != k2 {
            return Err(dim_err(format!(
                "bmm shapes {:?} and {:?} incompatible",
                a.shape(),
                b.shape()
            )));
        }
        let groups = ga;
        let mut out = vec![0.0; groups * m * n];
        for i in 0..groups {
            gemm_acc(
                m,
                k,
                n,
                MatRef::rows(&a.data()[i * m * k..], k),
                MatRef::rows(&b.data()[i * k * n..], n),
                &mut out[i * m * n..],
            );
        }
        let y = Rc::new(Tensor::from_parts(vec![groups, m, n], out));
        self.tape.push(
            "bmm",
            y,
            &[self, other],
            Box::new(move |g| {
                let mut da = vec![0.0; groups * m * k];
                let mut db = vec![0.0; groups * k * n];
                for i in 0..groups {
                    let gi = &g.data()[i * m * n..];
                    gemm_acc(
                        m,
                        n,
                        k,
                        MatRef::rows(gi, n),
                        MatRef::transposed(&b.data()[i * k * n..], n),
                        &mut da[i * m * k..],
                    );
                    gemm_acc(
                        k,
                        m,
                        n,
                        MatRef::transposed(&a.data()[i * m * k..], k),
                        MatRef::rows(gi, n),
                        &mut db[i * k * n..],
                    );
                }
                vec![
                    Some(Tensor::from_parts(vec![groups, m, k], da)),
                    Some(Tensor::from_parts(vec![groups, k, n], db)),
                ]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(Tensor::new(shape, x.data().to_vec())?);
        let original = x.shape().to_vec();
        self.tape.push(
            "reshape",
            y,
            &[self],
            Box::new(move |g| vec![Some(Tensor::from_parts(original.clone(), g.data().to_vec()))]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(format!("invalid permutation {perm:?} for rank {nd}")));
        }
        let y = Rc::new(permute_tensor(&x, perm));
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.push(
            "permute",
            y,
            &[self],
            Box::new(move |g| vec![Some(permute_tensor(g, &inverse))]),
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(dim_err(format!("transpose needs a matrix, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice max.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(dim_err(format!("softmax axis {axis} for shape {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x.data()[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let yc = y.clone();
        self.tape.push(
            "softmax",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g.data()[idx(j)] * yc.data()[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = yc.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
            }),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| dim_err("log_softmax on a scalar".into()))?;
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let yc = y.clone();
        self.tape.push(
            "log_softmax",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(n).zip(yc.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
            }),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(Tensor::scalar(x.data().iter().sum()));
        let shape = x.shape().to_vec();
        self.tape.push(
            "sum",
            y,
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(dim_err(format!("mean_axis {axis} for shape {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let y = Rc::new(Tensor::from_parts(shape, out));
        let in_shape = x.shape().to_vec();
        self.tape.push(
            "mean_axis",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..][..inner];
                        for (d, v) in dst.iter_mut().zip(&g.data()[o * inner..][..inner]) {
                            *d = v * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            }),
        )
    }

    /// Inserts a new axis at `axis` and repeats the tensor `count` times along it.
    pub fn expand(self, axis: usize, count: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis > x.ndim() || count == 0 {
            return Err(dim_err(format!(
                "expand axis {axis} x{count} for shape {:?}",
                x.shape()
            )));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(x.len() * count);
        for o in 0..outer {
            let src = &x.data()[o * inner..][..inner];
            for _ in 0..count {
                out.extend_from_slice(src);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, count);
        let y = Rc::new(Tensor::from_parts(shape, out));
        let in_shape = x.shape().to_vec();
        self.tape.push(
            "expand",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..count {
                        let src = &g.data()[(o * count + r) * inner..][..inner];
                        for (d, v) in dx[o * inner..][..inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            }),
        )
    }

    /// Joins vars along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| dim_err("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err(format!("concat axis {axis} for shape {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err(format!("concat shapes {base:?} and {s:?}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| v.shape()[axis..].iter().product())
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..][..w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let y = Rc::new(Tensor::from_parts(shape, out));
        tape.push(
            "concat",
            y,
            parts,
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            }),
        )
    }

    /// Square root of the sum of squares. The gradient at zero is taken as zero.
    pub fn frobenius_norm(self) -> Result<Var<'t>> {
        let x = self.value();
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = Rc::new(Tensor::scalar(norm));
        self.tape.push(
            "frobenius_norm",
            y,
            &[self],
            Box::new(move |g| {
                let s = if norm > 0.0 { g.item() / norm } else { 0.0 };
                vec![Some(x.map(|v| v * s))]
            }),
        )
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[rows, cols] = x.shape() else {
            return Err(dim_err(format!("normalize_rows needs a matrix, got {:?}", x.shape())));
        };
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for (r, row) in x.data().chunks(cols).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Normalization { row: r });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let y = Rc::new(Tensor::from_parts(vec![rows, cols], out));
        let yc = y.clone();
        self.tape.push(
            "normalize_rows",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), n) in g.data().chunks(cols).zip(yc.data().chunks(cols)).zip(&norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| (g - y * dot) / n));
                }
                vec![Some(Tensor::from_parts(vec![rows, cols], dx))]
            }),
        )
    }

    /// Cosine-similarity Gram matrix `X̂ X̂ᵀ` of a `B x D` matrix whose rows
    /// are L2-normalized first.
    pub fn gram_matrix(self) -> Result<Var<'t>> {
        self.normalize_rows()?.unit_row_gram()
    }

    /// Gram matrix of a matrix whose rows already have unit norm: the
    /// diagonal is exactly one and the result exactly symmetric.
    fn unit_row_gram(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[rows, cols] = x.shape() else {
            return Err(dim_err(format!("gram needs a matrix, got {:?}", x.shape())));
        };
        let row = |i: usize| &x.data()[i * cols..(i + 1) * cols];
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            g[i * rows + i] = 1.0;
            for j in i + 1..rows {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                g[i * rows + j] = dot;
                g[j * rows + i] = dot;
            }
        }
        let y = Rc::new(Tensor::from_parts(vec![rows, rows], g));
        self.tape.push(
            "gram",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..rows {
                        if i == j {
                            continue;
                        }
                        let coef = g.data()[i * rows + j] + g.data()[j * rows + i];
                        for (d, v) in dx[i * cols..(i + 1) * cols].iter_mut().zip(&x.data()[j * cols..(j + 1) * cols]) {
                            *d += coef * v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![rows, cols], dx))]
            }),
        )
    }

    /// `x · w + b` over the last axis of `x`, for any number of leading axes.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let ws = weight.shape();
        let (&in_dim, [w_in, w_out]) = (shape.last().unwrap_or(&0), &ws[..]) else {
            return Err(dim_err(format!("linear weight must be a matrix, got {ws:?}")));
        };
        if in_dim != *w_in {
            return Err(dim_err(format!(
                "linear input width {in_dim} does not match weight {ws:?}"
            )));
        }
        let rows = self.value().len() / in_dim;
        let mut y = self.reshape(&[rows, in_dim])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add_bias(b)?;
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = *w_out;
        y.reshape(&out_shape)
    }

    /// Bilinear sampling of a feature map at normalized points.
    ///
    /// `self` is `[H, W, C]` with points `[P, 2]`, or batched `[B, H, W, C]`
    /// with points `[B, P, 2]`. Point `(x, y)` in `[-1, 1]²` addresses cell
    /// centres: `x = -1` is the left edge of column 0. Coordinates beyond the
    /// outermost centres are clamped to the border.
    pub fn bilinear_sample(self, points: Var<'t>) -> Result<Var<'t>> {
        let feat = self.value();
        let pts = points.value();
        let (batched, b, h, w, c) = match feat.shape() {
            &[h, w, c] => (false, 1, h, w, c),
            &[b, h, w, c] => (true, b, h, w, c),
            s => return Err(dim_err(format!("bilinear_sample feature shape {s:?}"))),
        };
        let p = match (batched, pts.shape()) {
            (false, &[p, 2]) => p,
            (true, &[pb, p, 2]) if pb == b => p,
            (_, s) => return Err(dim_err(format!("bilinear_sample points shape {s:?}"))),
        };
        let taps: Vec<Taps> = pts
            .data()
            .chunks(2)
            .map(|xy| Taps::new(xy[0], xy[1], h, w))
            .collect();
        let mut out = vec![0.0; b * p * c];
        for bi in 0..b {
            let fb = &feat.data()[bi * h * w * c..][..h * w * c];
            for pi in 0..p {
                let t = &taps[bi * p + pi];
                let dst = &mut out[(bi * p + pi) * c..][..c];
                let (f00, f01, f10, f11) = t.corners(fb, w, c);
                for ch in 0..c {
                    dst[ch] = t.wy0 * (t.wx0 * f00[ch] + t.wx1 * f01[ch])
                        + t.wy1 * (t.wx0 * f10[ch] + t.wx1 * f11[ch]);
                }
            }
        }
        let shape = if batched { vec![b, p, c] } else { vec![p, c] };
        let y = Rc::new(Tensor::from_parts(shape, out));
        let feat_shape = feat.shape().to_vec();
        let pts_shape = pts.shape().to_vec();
        self.tape.push(
            "bilinear_sample",
            y,
            &[self, points],
            Box::new(move |g| {
                let mut dfeat = vec![0.0; b * h * w * c];
                let mut dpts = vec![0.0; b * p * 2];
                for bi in 0..b {
                    let fb = &feat.data()[bi * h * w * c..][..h * w * c];
                    let db = &mut dfeat[bi * h * w * c..][..h * w * c];
                    for pi in 0..p {
                        let t = &taps[bi * p + pi];
                        let gp = &g.data()[(bi * p + pi) * c..][..c];
                        let (f00, f01, f10, f11) = t.corners(fb, w, c);
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for ch in 0..c {
                            dx += gp[ch] * (t.wy0 * (f01[ch] - f00[ch]) + t.wy1 * (f11[ch] - f10[ch]));
                            dy += gp[ch] * (t.wx0 * (f10[ch] - f00[ch]) + t.wx1 * (f11[ch] - f01[ch]));
                        }
                        dpts[(bi * p + pi) * 2] = dx * t.dpx;
                        dpts[(bi * p + pi) * 2 + 1] = dy * t.dpy;
                        for (idx, wgt) in [
                            (t.y0 * w + t.x0, t.wy0 * t.wx0),
                            (t.y0 * w + t.x1, t.wy0 * t.wx1),
                            (t.y1 * w + t.x0, t.wy1 * t.wx0),
                            (t.y1 * w + t.x1, t.wy1 * t.wx1),
                        ] {
                            if wgt != 0.0 {
                                for (d, gv) in db[idx * c..][..c].iter_mut().zip(gp) {
                                    *d += wgt * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(feat_shape.clone(), dfeat)),
                    Some(Tensor::from_parts(pts_shape.clone(), dpts)),
                ]
            }),
        )
    }

    /// Unfolds 3x3 zero-padded neighbourhoods of a `[B, H, W, C]` map into a
    /// `[B*H*W, 9*C]` matrix, ordered (dy, dx, channel).
    pub fn im2col3x3(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[b, h, w, c] = x.shape() else {
            return Err(dim_err(format!("im2col3x3 needs [B,H,W,C], got {:?}", x.shape())));
        };
        let cols = 9 * c;
        let mut out = vec![0.0; b * h * w * cols];
        for_each_tap(b, h, w, |dst_row, tap, src| {
            if let Some(src) = src {
                out[dst_row * cols + tap * c..][..c].copy_from_slice(&x.data()[src * c..][..c]);
            }
        });
        let y = Rc::new(Tensor::from_parts(vec![b * h * w, cols], out));
        self.tape.push(
            "im2col3x3",
            y,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * h * w * c];
                for_each_tap(b, h, w, |dst_row, tap, src| {
                    if let Some(src) = src {
                        let gsrc = &g.data()[dst_row * cols + tap * c..][..c];
                        for (d, v) in dx[src * c..][..c].iter_mut().zip(gsrc) {
                            *d += v;
                        }
                    }
                });
                vec![Some(Tensor::from_parts(vec![b, h, w, c], dx))]
            }),
        )
    }

    /// 3x3 convolution, stride 1, zero padding; `weight` is `[9*C_in, C_out]`.
    pub fn conv3x3(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[b, h, w, _] = &shape[..] else {
            return Err(dim_err(format!("conv3x3 needs [B,H,W,C], got {shape:?}")));
        };
        let c_out = *weight.shape().last().unwrap_or(&0);
        self.im2col3x3()?
            .linear(weight, Some(bias))?
            .reshape(&[b, h, w, c_out])
    }
}

/// Visits every (output cell, tap) pair of a 3x3 window with its source cell,
/// `None` for padding.
fn for_each_tap(b: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = (bi * h + i) * w + j;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (si, sj) = (i + dy, j + dx);
                        let src = (si >= 1 && si <= h && sj >= 1 && sj <= w)
                            .then(|| (bi * h + si - 1) * w + sj - 1);
                        f(row, dy * 3 + dx, src);
                    }
                }
            }
        }
    }
}

/// Interpolation stencil for one sampling point.
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx0: f64,
    wx1: f64,
    wy0: f64,
    wy1: f64,
    /// d(pixel x)/d(normalized x); zero when clamped.
    dpx: f64,
    dpy: f64,
}

impl Taps {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, dpx) = axis_taps(x, w);
        let (y0, y1, fy, dpy) = axis_taps(y, h);
        Taps {
            x0,
            x1,
            y0,
            y1,
            wx0: 1.0 - fx,
            wx1: fx,
            wy0: 1.0 - fy,
            wy1: fy,
            dpx,
            dpy,
        }
    }

    fn corners<'a>(&self, f: &'a [f64], w: usize, c: usize) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let at = |yy: usize, xx: usize| &f[(yy * w + xx) * c..][..c];
        (at(self.y0, self.x0), at(self.y0, self.x1), at(self.y1, self.x0), at(self.y1, self.x1))
    }
}

/// Lower index, upper index, fraction and Jacobian along one axis of `n` cells.
fn axis_taps(coord: f64, n: usize) -> (usize, usize, f64, f64) {
    let max = (n - 1) as f64;
    let raw = ((coord + 1.0) * n as f64 - 1.0) / 2.0;
    let (pix, jac) = if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > max {
        (max, 0.0)
    } else {
        (raw, n as f64 / 2.0)
    };
    let mut lo = pix.floor();
    let mut frac = pix - lo;
    if frac < KNOT_SNAP {
        frac = 0.0;
    } else if frac > 1.0 - KNOT_SNAP {
        lo += 1.0;
        frac = 0.0;
    }
    let lo = (lo as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, frac, jac)
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x.data()[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
