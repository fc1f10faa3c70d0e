use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_tn, Tensor};

/// Sum whose result does not depend on the order of `terms`.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

impl<'g> Var<'g> {
    /// Single-head scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`.
    ///
    /// Reductions over the key axis are computed on sorted terms, so
    /// permuting the keys and values together leaves every output bit-identical.
    pub fn attention(&self, keys: Var<'g>, values: Var<'g>) -> Result<Var<'g>> {
        let (qs, ks, vs) = (self.shape(), keys.shape(), values.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (n, m, d, dv) = (qs[0], ks[0], qs[1], vs[1]);
        let scale = 1.0 / (d as f64).sqrt();
        let (q, k, v) = (self.value(), keys.value(), values.value());

        let mut probs = vec![0.0; n * m];
        let mut scratch = vec![0.0; m];
        for i in 0..n {
            let qi = &q.data()[i * d..(i + 1) * d];
            let row = &mut probs[i * m..(i + 1) * m];
            for j in 0..m {
                row[j] = dot(qi, &k.data()[j * d..(j + 1) * d]) * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for e in row.iter_mut() {
                *e = (*e - max).exp();
            }
            scratch.copy_from_slice(row);
            let total = order_free_sum(&mut scratch);
            row.iter_mut().for_each(|e| *e /= total);
        }
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            for c in 0..dv {
                for j in 0..m {
                    scratch[j] = probs[i * m + j] * v.data()[j * dv + c];
                }
                out[i * dv + c] = order_free_sum(&mut scratch);
            }
        }
        let y = Tensor::from_parts(vec![n, dv], out);
        Ok(self.graph.record("attention", y, &[*self, keys, values], move |g, need| {
            let gd = g.data();
            let gv = need[2].then(|| {
                let mut gv = vec![0.0; m * dv];
                gemm_tn(&probs, gd, &mut gv, m, n, dv);
                Tensor::from_parts(vec![m, dv], gv)
            });
            let mut ds = vec![0.0; n * m];
            if need[0] || need[1] {
                for i in 0..n {
                    let gi = &gd[i * dv..(i + 1) * dv];
                    let prow = &probs[i * m..(i + 1) * m];
                    let dp: Vec<f64> = (0..m).map(|j| dot(gi, &v.data()[j * dv..(j + 1) * dv])).collect();
                    let s: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        ds[i * m + j] = prow[j] * (dp[j] - s) * scale;
                    }
                }
            }
            let gq = need[0].then(|| {
                let mut gq = vec![0.0; n * d];
                gemm_nn(&ds, k.data(), &mut gq, n, m, d);
                Tensor::from_parts(vec![n, d], gq)
            });
            let gk = need[1].then(|| {
                let mut gk = vec![0.0; m * d];
                gemm_tn(&ds, q.data(), &mut gk, m, n, d);
                Tensor::from_parts(vec![m, d], gk)
            });
            vec![gq, gk, gv]
        }))
    }
}
