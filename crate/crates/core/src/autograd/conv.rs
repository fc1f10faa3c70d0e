use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry, ResizePlan, Tensor};

/// Per-row normalization statistics shared by group and layer norm.
/// Normalizes each `chunk`-sized block of `x` independently.
fn normalize_blocks(x: &[f64], chunk: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / chunk);
    for (src, dst) in x.chunks(chunk).zip(xhat.chunks_mut(chunk)) {
        let n = chunk as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * istd;
        }
        inv_std.push(istd);
    }
    (xhat, inv_std)
}

/// Input gradient of a block normalization given `d xhat`.
fn normalize_blocks_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], chunk: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    let n = chunk as f64;
    for (((dst, dh), xh), &istd) in dx.chunks_mut(chunk).zip(dxhat.chunks(chunk)).zip(xhat.chunks(chunk)).zip(inv_std) {
        let mean_dh = dh.iter().sum::<f64>() / n;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..chunk {
            dst[i] = istd * (dh[i] - mean_dh - xh[i] * mean_dh_xh);
        }
    }
    dx
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation of a `[C_in,H,W]` map with `[C_out,C_in,k,k]` weights.
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Result<Var<'g>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[0] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        let x = self.value();
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "conv2d input" });
        }
        let geo = ConvGeometry::new(xs[0], xs[1], xs[2], k, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("input {xs:?} too small for k={k} pad={padding}")))?;
        let (rows, n) = (geo.cols_rows(), geo.cols_len());
        let cols = if k == 1 && stride == 1 && padding == 0 { x.data().to_vec() } else { geo.im2col(x.data()) };
        let w = weight.value();
        let mut out = vec![0.0; c_out * n];
        if let Some(b) = &bias {
            for (row, bv) in out.chunks_mut(n).zip(b.value().data()) {
                row.iter_mut().for_each(|v| *v = *bv);
            }
        }
        gemm_nn(w.data(), &cols, &mut out, c_out, rows, n);
        let y = Tensor::from_parts(vec![c_out, geo.out_h, geo.out_w], out);

        let mut inputs = vec![*self, weight];
        inputs.extend(bias);
        Ok(self.graph.record("conv2d", y, &inputs, move |g, need| {
            let gx = need[0].then(|| {
                let mut gcols = vec![0.0; rows * n];
                gemm_tn(w.data(), g.data(), &mut gcols, rows, c_out, n);
                let data = if k == 1 && stride == 1 && padding == 0 { gcols } else { geo.col2im(&gcols) };
                Tensor::from_parts(vec![geo.c_in, geo.h, geo.w], data)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; c_out * rows];
                gemm_nt(g.data(), &cols, &mut gw, c_out, n, rows);
                Tensor::from_parts(vec![c_out, geo.c_in, k, k], gw)
            });
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads
                    .push(need[2].then(|| {
                        Tensor::from_parts(vec![c_out], g.data().chunks(n).map(|r| r.iter().sum()).collect())
                    }));
            }
            grads
        }))
    }

    /// Group normalization of a `[C,H,W]` map followed by a per-channel affine map.
    pub fn group_norm(&self, groups: usize, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || groups == 0 || s[0] % groups != 0 {
            return Err(Error::shape("group_norm", format!("{s:?} with {groups} groups")));
        }
        let c = s[0];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
            ));
        }
        let plane = s[1] * s[2];
        let chunk = c / groups * plane;
        let x = self.value();
        let (xhat, inv_std) = normalize_blocks(x.data(), chunk, eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let mut y = vec![0.0; x.numel()];
        for ch in 0..c {
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            for i in ch * plane..(ch + 1) * plane {
                y[i] = gv * xhat[i] + bv;
            }
        }
        Ok(self.graph.record("group_norm", Tensor::from_parts(s.clone(), y), &[*self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dxhat = vec![0.0; gd.len()];
                for ch in 0..c {
                    let gv = gm.data()[ch];
                    for i in ch * plane..(ch + 1) * plane {
                        dxhat[i] = gd[i] * gv;
                    }
                }
                Tensor::from_parts(s.clone(), normalize_blocks_backward(&dxhat, &xhat, &inv_std, chunk))
            });
            let ggamma = need[1].then(|| {
                Tensor::from_parts(
                    vec![c],
                    (0..c).map(|ch| (ch * plane..(ch + 1) * plane).map(|i| gd[i] * xhat[i]).sum()).collect(),
                )
            });
            let gbeta =
                need[2].then(|| Tensor::from_parts(vec![c], gd.chunks(plane).map(|r| r.iter().sum()).collect()));
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::shape("layer_norm", format!("{s:?} with affine {:?}", gamma.shape())));
        }
        let n = s[1];
        let x = self.value();
        let (xhat, inv_std) = normalize_blocks(x.data(), n, eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let mut y = xhat.clone();
        for row in y.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * gm.data()[j] + bt.data()[j];
            }
        }
        Ok(self.graph.record("layer_norm", Tensor::from_parts(s.clone(), y), &[*self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dxhat = gd.to_vec();
                for row in dxhat.chunks_mut(n) {
                    for j in 0..n {
                        row[j] *= gm.data()[j];
                    }
                }
                Tensor::from_parts(s.clone(), normalize_blocks_backward(&dxhat, &xhat, &inv_std, n))
            });
            let ggamma = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for (grow, xrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        acc[j] += grow[j] * xrow[j];
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            let gbeta = need[2].then(|| {
                let mut acc = vec![0.0; n];
                for grow in gd.chunks(n) {
                    for j in 0..n {
                        acc[j] += grow[j];
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Bilinear up-sampling of a `[C,H,W]` map by an integer factor, with
    /// half-pixel centers (`align_corners = false`).
    pub fn upsample(&self, factor: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample", format!("{s:?} x{factor}")));
        }
        let plan = ResizePlan::new(s[1], s[2], factor);
        let x = self.value();
        let mut out = vec![0.0; s[0] * plan.out_h * plan.out_w];
        plan.forward(x.data(), &mut out, s[0]);
        let y = Tensor::from_parts(vec![s[0], plan.out_h, plan.out_w], out);
        Ok(self.graph.record("upsample", y, &[*self], move |g, _| {
            let mut gx = vec![0.0; s.iter().product()];
            plan.backward(g.data(), &mut gx, s[0]);
            vec![Some(Tensor::from_parts(s.clone(), gx))]
        }))
    }

    pub fn upsample2x(&self) -> Result<Var<'g>> {
        self.upsample(2)
    }
}
