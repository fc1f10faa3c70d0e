use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<'g> Var<'g> {
    /// Elementwise op whose derivative is expressed through the input and output values.
    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let saved = Rc::clone(&y);
        self.graph.record(op, Rc::clone(&y), &[*self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(saved.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// Natural log of `max(x, floor)`; the gradient is zero below the floor.
    pub fn ln_clamped(&self, floor: f64) -> Var<'g> {
        self.unary("ln", move |x| x.max(floor).ln(), move |x, _| if x > floor { 1.0 / x } else { 0.0 })
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("add", self, &other)?;
        let y = zip_map(&self.value(), &other.value(), |a, b| a + b);
        Ok(self.graph.record("add", y, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("sub", self, &other)?;
        let y = zip_map(&self.value(), &other.value(), |a, b| a - b);
        Ok(self.graph.record("sub", y, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("mul", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = zip_map(&a, &b, |x, y| x * y);
        Ok(self.graph.record("mul", y, &[*self, other], move |g, need| {
            vec![need[0].then(|| zip_map(g, &b, |gv, bv| gv * bv)), need[1].then(|| zip_map(g, &a, |gv, av| gv * av))]
        }))
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("div", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = zip_map(&a, &b, |x, y| x / y);
        Ok(self.graph.record("div", y, &[*self, other], move |g, need| {
            let ga = need[0].then(|| zip_map(g, &b, |gv, bv| gv / bv));
            let gb = need[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            });
            vec![ga, gb]
        }))
    }

    /// Adds a vector along the last axis: `x[..., j] + b[j]`.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        let n = *shape.last().unwrap_or(&1);
        if bias.shape() != [n] {
            return Err(Error::shape("add_row", format!("{shape:?} + {:?}", bias.shape())));
        }
        let x = self.value();
        let b = bias.value();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.graph.record("add_row", y, &[*self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// Multiplies by a vector along the last axis: `x[..., j] * s[j]`.
    pub fn mul_row(&self, scale: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        let n = *shape.last().unwrap_or(&1);
        if scale.shape() != [n] {
            return Err(Error::shape("mul_row", format!("{shape:?} * {:?}", scale.shape())));
        }
        let x = self.value();
        let s = scale.value();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, sv) in row.iter_mut().zip(s.data()) {
                *v *= sv;
            }
        }
        Ok(self.graph.record("mul_row", y, &[*self, scale], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(n) {
                    for (v, sv) in row.iter_mut().zip(s.data()) {
                        *v *= sv;
                    }
                }
                gx
            });
            let gs = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for (grow, xrow) in g.data().chunks(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        acc[j] += grow[j] * xrow[j];
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            vec![gx, gs]
        }))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut c, m, k, n);
        Ok(self.graph.record("matmul", Tensor::from_parts(vec![m, n], c), &[*self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt(g.data(), b.data(), &mut ga, m, n, k);
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn(a.data(), g.data(), &mut gb, k, m, n);
                Tensor::from_parts(vec![k, n], gb)
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let y = self.value().transpose2d();
        Ok(self.graph.record("transpose", y, &[*self], |g, _| vec![Some(g.transpose2d())]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let old = self.shape();
        let y = self.value().reshape(shape)?;
        Ok(self
            .graph
            .record("reshape", y, &[*self], move |g, _| vec![Some(Tensor::from_parts(old.clone(), g.data().to_vec()))]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let shape = self.shape();
        let n = *shape.last().unwrap_or(&1);
        let x = self.value();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let saved = y.clone();
        self.graph.record("softmax", y, &[*self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for ((dst, grow), yrow) in gx.chunks_mut(n).zip(g.data().chunks(n)).zip(saved.data().chunks(n)) {
                let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[j] = yrow[j] * (grow[j] - s);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    pub fn sum(&self) -> Var<'g> {
        let shape = self.shape();
        let y = Tensor::scalar(self.value().sum());
        self.graph.record("sum", y, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'g> {
        let shape = self.shape();
        let n = self.value().numel().max(1) as f64;
        let y = Tensor::scalar(self.value().sum() / n);
        self.graph.record("mean", y, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))])
    }

    /// Sums over the last axis.
    pub fn sum_last(&self) -> Var<'g> {
        let shape = self.shape();
        let n = *shape.last().unwrap_or(&1);
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let data = self.value().data().chunks(n).map(|r| r.iter().sum()).collect();
        self.graph.record("sum_last", Tensor::from_parts(out_shape, data), &[*self], move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        })
    }

    /// Concatenates along the first axis.
    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead.push(s[0]);
            data.extend_from_slice(p.value().data());
        }
        let inner: usize = tail.iter().product();
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&tail);
        Ok(first.graph.record("concat", Tensor::from_parts(shape, data), parts, move |g, need| {
            let mut offset = 0;
            lead.iter()
                .zip(need)
                .map(|(&rows, &needed)| {
                    let len = rows * inner;
                    let piece = needed.then(|| {
                        let mut s = vec![rows];
                        s.extend_from_slice(&tail);
                        Tensor::from_parts(s, g.data()[offset..offset + len].to_vec())
                    });
                    offset += len;
                    piece
                })
                .collect()
        }))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("{s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(first.graph.record("concat_cols", Tensor::from_parts(vec![rows, total], data), parts, move |g, need| {
            let mut col = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &needed)| {
                    let piece = needed.then(|| {
                        let mut out = vec![0.0; rows * w];
                        for r in 0..rows {
                            out[r * w..(r + 1) * w].copy_from_slice(&g.data()[r * total + col..r * total + col + w]);
                        }
                        Tensor::from_parts(vec![rows, w], out)
                    });
                    col += w;
                    piece
                })
                .collect()
        }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?}[.., {start}..{end}]")));
        }
        let (rows, cols, w) = (s[0], s[1], end - start);
        let x = self.value();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
        }
        Ok(self.graph.record("slice_cols", Tensor::from_parts(vec![rows, w], data), &[*self], move |g, _| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], gx))]
        }))
    }

    /// Selects rows of a 2-D tensor; repeated indices accumulate gradient.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("{s:?} rows {rows:?}")));
        }
        let (n, width) = (s[0], s[1]);
        let x = self.value();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let rows = rows.to_vec();
        Ok(self.graph.record(
            "gather_rows",
            Tensor::from_parts(vec![rows.len(), width], data),
            &[*self],
            move |g, _| {
                let mut gx = vec![0.0; n * width];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        gx[r * width + j] += g.data()[i * width + j];
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, width], gx))]
            },
        ))
    }

    /// Picks one entry per row of a 2-D tensor: `out[i] = x[i, cols[i]]`.
    pub fn pick(&self, cols: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(Error::shape("pick", format!("{s:?} cols {cols:?}")));
        }
        let width = s[1];
        let x = self.value();
        let data = cols.iter().enumerate().map(|(i, &c)| x.data()[i * width + c]).collect();
        let cols = cols.to_vec();
        Ok(self.graph.record("pick", Tensor::from_parts(vec![cols.len()], data), &[*self], move |g, _| {
            let mut gx = Tensor::zeros(&s);
            for (i, &c) in cols.iter().enumerate() {
                gx.data_mut()[i * width + c] = g.data()[i];
            }
            vec![Some(gx)]
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
