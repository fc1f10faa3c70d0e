use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{BilinearTaps, Tensor};

/// Layout of a flattened multi-level memory for deformable sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformSampling {
    /// `(height, width)` of every level, in memory order.
    pub levels: Vec<(usize, usize)>,
    pub heads: usize,
    pub points: usize,
}

impl DeformSampling {
    pub fn starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|&(h, w)| {
                let s = acc;
                acc += h * w;
                s
            })
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.levels.iter().map(|&(h, w)| h * w).sum()
    }

    /// Number of sampling points per query (over all heads and levels).
    pub fn samples_per_query(&self) -> usize {
        self.heads * self.levels.len() * self.points
    }
}

impl<'g> Var<'g> {
    /// Samples a `[C,H,W]` map at `[P,2]` normalized `(x, y)` locations,
    /// giving `[P,C]`. Pixel centers sit at `(i + 0.5) / size`; taps falling
    /// outside the map read zero.
    pub fn bilinear_sample(&self, points: Var<'g>) -> Result<Var<'g>> {
        let (vs, ps) = (self.shape(), points.shape());
        if vs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(Error::shape("bilinear_sample", format!("value {vs:?}, points {ps:?}")));
        }
        let (c, h, w) = (vs[0], vs[1], vs[2]);
        let plane = h * w;
        let p = ps[0];
        let value = self.value();
        let pts = points.value();
        let taps: Vec<BilinearTaps> = pts.data().chunks(2).map(|xy| BilinearTaps::new(xy[0], xy[1], h, w)).collect();
        let mut out = vec![0.0; p * c];
        for (i, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let base = &value.data()[ch * plane..(ch + 1) * plane];
                let mut s = 0.0;
                for q in 0..4 {
                    if let Some(idx) = t.idx[q] {
                        s += t.weight[q] * base[idx];
                    }
                }
                out[i * c + ch] = s;
            }
        }
        let y = Tensor::from_parts(vec![p, c], out);
        Ok(self.graph.record("bilinear_sample", y, &[*self, points], move |g, need| {
            let gd = g.data();
            let gv = need[0].then(|| {
                let mut gv = vec![0.0; c * plane];
                for (i, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let go = gd[i * c + ch];
                        for q in 0..4 {
                            if let Some(idx) = t.idx[q] {
                                gv[ch * plane + idx] += t.weight[q] * go;
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![c, h, w], gv)
            });
            let gp = need[1].then(|| {
                let mut gp = vec![0.0; p * 2];
                for (i, t) in taps.iter().enumerate() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for ch in 0..c {
                        let go = gd[i * c + ch];
                        let base = &value.data()[ch * plane..(ch + 1) * plane];
                        for q in 0..4 {
                            if let Some(idx) = t.idx[q] {
                                dx += go * t.dwdx[q] * base[idx];
                                dy += go * t.dwdy[q] * base[idx];
                            }
                        }
                    }
                    gp[2 * i] = dx * w as f64;
                    gp[2 * i + 1] = dy * h as f64;
                }
                Tensor::from_parts(vec![p, 2], gp)
            });
            vec![gv, gp]
        }))
    }

    /// Multi-scale deformable sampling.
    ///
    /// `self` is the token-major memory `[tokens, D]`; `locations` is
    /// `[Q, heads*levels*points*2]` holding normalized `(x, y)` pairs laid out
    /// as `((head * levels + level) * points + point)`; `weights` is
    /// `[Q, heads*levels*points]` in the same order. Each head reads its own
    /// `D / heads` channel slice. Returns `[Q, D]`.
    pub fn deform_sample(&self, locations: Var<'g>, weights: Var<'g>, layout: &DeformSampling) -> Result<Var<'g>> {
        let (vs, ls, ws) = (self.shape(), locations.shape(), weights.shape());
        let samples = layout.samples_per_query();
        if vs.len() != 2
            || vs[0] != layout.tokens()
            || layout.heads == 0
            || vs[1] % layout.heads != 0
            || ls.len() != 2
            || ws.len() != 2
            || ls[0] != ws[0]
            || ls[1] != 2 * samples
            || ws[1] != samples
        {
            return Err(Error::shape(
                "deform_sample",
                format!("value {vs:?}, locations {ls:?}, weights {ws:?}, layout {layout:?}"),
            ));
        }
        let (q_count, d) = (ls[0], vs[1]);
        let dh = d / layout.heads;
        let levels = layout.levels.clone();
        let starts = layout.starts();
        let (n_levels, n_points, heads) = (levels.len(), layout.points, layout.heads);
        let value = self.value();
        let loc = locations.value();
        let wts = weights.value();

        // Taps for every (query, head, level, point), in the location layout order.
        let mut taps = Vec::with_capacity(q_count * samples);
        for q in 0..q_count {
            for m in 0..heads {
                for (l, &(h, w)) in levels.iter().enumerate() {
                    for k in 0..n_points {
                        let s = (m * n_levels + l) * n_points + k;
                        let xy = &loc.data()[q * 2 * samples + 2 * s..q * 2 * samples + 2 * s + 2];
                        taps.push(BilinearTaps::new(xy[0], xy[1], h, w));
                    }
                }
            }
        }

        let mut out = vec![0.0; q_count * d];
        for q in 0..q_count {
            for m in 0..heads {
                let orow = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
                for l in 0..n_levels {
                    for k in 0..n_points {
                        let s = (m * n_levels + l) * n_points + k;
                        let a = wts.data()[q * samples + s];
                        let t = &taps[q * samples + s];
                        for c in 0..4 {
                            if let Some(idx) = t.idx[c] {
                                let coef = a * t.weight[c];
                                let tok = starts[l] + idx;
                                let vrow = &value.data()[tok * d + m * dh..tok * d + (m + 1) * dh];
                                for (o, v) in orow.iter_mut().zip(vrow) {
                                    *o += coef * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let y = Tensor::from_parts(vec![q_count, d], out);
        let tokens = layout.tokens();
        Ok(self.graph.record("deform_sample", y, &[*self, locations, weights], move |g, need| {
            let gd = g.data();
            let mut gv = need[0].then(|| vec![0.0; tokens * d]);
            let mut gl = need[1].then(|| vec![0.0; q_count * 2 * samples]);
            let mut gw = need[2].then(|| vec![0.0; q_count * samples]);
            for q in 0..q_count {
                for m in 0..heads {
                    let grow = &gd[q * d + m * dh..q * d + (m + 1) * dh];
                    for (l, &(h, w)) in levels.iter().enumerate() {
                        for k in 0..n_points {
                            let s = (m * n_levels + l) * n_points + k;
                            let a = wts.data()[q * samples + s];
                            let t = &taps[q * samples + s];
                            let (mut dot_w, mut dx, mut dy) = (0.0, 0.0, 0.0);
                            for c in 0..4 {
                                let Some(idx) = t.idx[c] else { continue };
                                let tok = starts[l] + idx;
                                let vrow = &value.data()[tok * d + m * dh..tok * d + (m + 1) * dh];
                                let gv_dot: f64 = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                dot_w += t.weight[c] * gv_dot;
                                dx += t.dwdx[c] * gv_dot;
                                dy += t.dwdy[c] * gv_dot;
                                if let Some(gv) = gv.as_mut() {
                                    let coef = a * t.weight[c];
                                    let dst = &mut gv[tok * d + m * dh..tok * d + (m + 1) * dh];
                                    for (o, gr) in dst.iter_mut().zip(grow) {
                                        *o += coef * gr;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[q * samples + s] = dot_w;
                            }
                            if let Some(gl) = gl.as_mut() {
                                gl[q * 2 * samples + 2 * s] = a * dx * w as f64;
                                gl[q * 2 * samples + 2 * s + 1] = a * dy * h as f64;
                            }
                        }
                    }
                }
            }
            vec![
                gv.map(|v| Tensor::from_parts(vec![tokens, d], v)),
                gl.map(|v| Tensor::from_parts(vec![q_count, 2 * samples], v)),
                gw.map(|v| Tensor::from_parts(vec![q_count, samples], v)),
            ]
        }))
    }
}
