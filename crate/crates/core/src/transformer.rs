//! Multi-scale deformable-attention encoder and decoder.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{DeformSampling, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const POS_TEMPERATURE: f64 = 10000.0;

/// Sine/cosine encoding of a `h x w` grid, `[dim, h, w]`.
///
/// The first half of the channels encodes the row coordinate and the second
/// half the column coordinate; within each half, channel pairs `(2k, 2k+1)`
/// hold `sin` and `cos` at frequency `T^(-2k/(dim/2))` of the normalized
/// position `2π (i + 0.5) / size`.
pub fn sine_encoding(dim: usize, h: usize, w: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("encoding width {dim} is not a multiple of 4")));
    }
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim, h, w]);
    let data = out.data_mut();
    for c in 0..dim {
        let (axis_c, along_x) = if c < half { (c, false) } else { (c - half, true) };
        let freq = POS_TEMPERATURE.powf((2 * (axis_c / 2)) as f64 / half as f64);
        for y in 0..h {
            for x in 0..w {
                let (i, size) = if along_x { (x, w) } else { (y, h) };
                let arg = 2.0 * PI * (i as f64 + 0.5) / size as f64 / freq;
                data[(c * h + y) * w + x] = if axis_c % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    Ok(out)
}

/// Token layout of a flattened pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelTable {
    /// `(height, width)` per level.
    pub shapes: Vec<(usize, usize)>,
    /// Index of each level's first token.
    pub starts: Vec<usize>,
}

impl LevelTable {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            starts.push(acc);
            acc += h * w;
        }
        LevelTable { shapes, starts }
    }

    pub fn tokens(&self) -> usize {
        self.shapes.iter().map(|&(h, w)| h * w).sum()
    }

    /// `(level, x, y)` of a token.
    pub fn locate(&self, token: usize) -> Option<(usize, usize, usize)> {
        let level = self.starts.iter().rposition(|&s| s <= token)?;
        let (h, w) = self.shapes[level];
        let local = token - self.starts[level];
        (local < h * w).then_some((level, local % w, local / w))
    }

    pub fn index(&self, level: usize, x: usize, y: usize) -> Option<usize> {
        let &(h, w) = self.shapes.get(level)?;
        (x < w && y < h).then(|| self.starts[level] + y * w + x)
    }

    /// Normalized centre `((x + 0.5) / w, (y + 0.5) / h)` of every token, `[tokens, 2]`.
    pub fn token_centers(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.tokens() * 2);
        for &(h, w) in &self.shapes {
            for y in 0..h {
                for x in 0..w {
                    data.push((x as f64 + 0.5) / w as f64);
                    data.push((y as f64 + 0.5) / h as f64);
                }
            }
        }
        Tensor::from_parts(vec![self.tokens(), 2], data)
    }

    pub fn sampling(&self, heads: usize, points: usize) -> DeformSampling {
        DeformSampling { levels: self.shapes.clone(), heads, points }
    }
}

/// `[C,H,W]` to token-major `[H*W, C]`.
pub fn to_tokens<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("to_tokens", format!("expected [C,H,W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// Sums each level with its token-major encoding `[H_l*W_l, D]` and
/// concatenates the levels into a `[tokens, D]` memory.
pub fn flatten_pyramid<'g>(levels: &[Var<'g>], encodings: &[Var<'g>]) -> Result<(Var<'g>, LevelTable)> {
    if levels.is_empty() || levels.len() != encodings.len() {
        return Err(Error::shape(
            "flatten_pyramid",
            format!("{} levels but {} encodings", levels.len(), encodings.len()),
        ));
    }
    let mut parts = Vec::with_capacity(levels.len());
    let mut shapes = Vec::with_capacity(levels.len());
    for (&level, &enc) in levels.iter().zip(encodings) {
        let s = level.shape();
        if s.len() != 3 {
            return Err(Error::shape("flatten_pyramid", format!("level {s:?}")));
        }
        shapes.push((s[1], s[2]));
        parts.push(to_tokens(level)?.add(enc)?);
    }
    Ok((Var::concat(&parts)?, LevelTable::new(shapes)))
}

/// Multi-scale deformable attention.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub value_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl MsDeformAttn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut R,
    ) -> Self {
        let samples = heads * levels * points;
        let sampling_offsets = Linear::zeros(store, &format!("{name}.sampling_offsets"), dim, samples * 2);
        // Head h starts on a ray at angle 2πh/heads, point k at distance k+1.
        let bias = store.get_mut(sampling_offsets.bias);
        for h in 0..heads {
            let theta = 2.0 * PI * h as f64 / heads as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let norm = dx.abs().max(dy.abs());
            for l in 0..levels {
                for k in 0..points {
                    let i = ((h * levels + l) * points + k) * 2;
                    bias.data_mut()[i] = dx / norm * (k + 1) as f64;
                    bias.data_mut()[i + 1] = dy / norm * (k + 1) as f64;
                }
            }
        }
        MsDeformAttn {
            value_proj: Linear::new(store, &format!("{name}.value_proj"), dim, dim, rng),
            sampling_offsets,
            attention_weights: Linear::zeros(store, &format!("{name}.attention_weights"), dim, samples),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), dim, dim, rng),
            heads,
            levels,
            points,
        }
    }

    /// Attention weights `[Q, heads*levels*points]`, softmax-normalized over
    /// the `levels*points` samples of each head.
    pub fn weights<'g>(&self, p: &Bindings<'g>, query: Var<'g>) -> Result<Var<'g>> {
        let q = query.shape()[0];
        let lk = self.levels * self.points;
        self.attention_weights
            .forward(p, query)?
            .reshape(&[q * self.heads, lk])?
            .softmax()
            .reshape(&[q, self.heads * lk])
    }

    /// Normalized sampling locations `[Q, heads*levels*points*2]`:
    /// the reference point plus offsets measured in pixels of each level.
    pub fn locations<'g>(
        &self,
        p: &Bindings<'g>,
        query: Var<'g>,
        refs: Var<'g>,
        table: &LevelTable,
    ) -> Result<Var<'g>> {
        let samples = self.heads * self.levels * self.points;
        let mut tile = Tensor::zeros(&[2, samples * 2]);
        let mut scale = Tensor::zeros(&[samples * 2]);
        for s in 0..samples {
            let (h, w) = table.shapes[(s / self.points) % self.levels];
            tile.data_mut()[2 * s] = 1.0;
            tile.data_mut()[samples * 2 + 2 * s + 1] = 1.0;
            scale.data_mut()[2 * s] = 1.0 / w as f64;
            scale.data_mut()[2 * s + 1] = 1.0 / h as f64;
        }
        let offsets = self.sampling_offsets.forward(p, query)?.mul_row(p.constant(scale))?;
        refs.matmul(p.constant(tile))?.add(offsets)
    }

    /// `query: [Q,D]`, `refs: [Q,2]` in `[0,1]`, `input: [tokens,D]` laid out per `table`.
    pub fn forward<'g>(
        &self,
        p: &Bindings<'g>,
        query: Var<'g>,
        refs: Var<'g>,
        input: Var<'g>,
        table: &LevelTable,
    ) -> Result<Var<'g>> {
        if table.shapes.len() != self.levels {
            return Err(Error::shape(
                "ms_deform_attn",
                format!("{} levels, module built for {}", table.shapes.len(), self.levels),
            ));
        }
        let rs = refs.shape();
        if rs.len() != 2 || rs[1] != 2 || rs[0] != query.shape()[0] {
            return Err(Error::shape("ms_deform_attn", format!("refs {rs:?} for query {:?}", query.shape())));
        }
        let value = self.value_proj.forward(p, input)?;
        let locations = self.locations(p, query, refs, table)?;
        let weights = self.weights(p, query)?;
        let sampled = value.deform_sample(locations, weights, &table.sampling(self.heads, self.points))?;
        self.out_proj.forward(p, sampled)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MsDeformAttn,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        levels: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.width;
        EncoderLayer {
            attn: MsDeformAttn::new(store, &format!("{name}.attn"), d, cfg.heads, levels, cfg.points, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 2 * d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>, refs: Var<'g>, table: &LevelTable) -> Result<Var<'g>> {
        let x = self.norm1.forward(p, x.add(self.attn.forward(p, x, refs, x, table)?)?)?;
        self.norm2.forward(p, x.add(self.ffn.forward(p, x)?)?)
    }
}

/// Dense multi-head attention over a small set of queries.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Queries and keys come from `qk`, values from `v`.
    pub fn forward<'g>(&self, p: &Bindings<'g>, qk: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
        let q = self.q.forward(p, qk)?;
        let k = self.k.forward(p, qk)?;
        let v = self.v.forward(p, v)?;
        let dh = q.shape()[1] / self.heads;
        let heads = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                q.slice_cols(a, b)?.attention(k.slice_cols(a, b)?, v.slice_cols(a, b)?)
            })
            .collect::<Result<Vec<_>>>()?;
        self.out.forward(p, Var::concat_cols(&heads)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: SelfAttention,
    norm1: LayerNorm,
    cross_attn: MsDeformAttn,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        levels: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.width;
        DecoderLayer {
            self_attn: SelfAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            cross_attn: MsDeformAttn::new(store, &format!("{name}.cross_attn"), d, cfg.heads, levels, cfg.points, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 2 * d, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
        }
    }

    pub fn forward<'g>(
        &self,
        p: &Bindings<'g>,
        tgt: Var<'g>,
        pos: Var<'g>,
        refs: Var<'g>,
        memory: Var<'g>,
        table: &LevelTable,
    ) -> Result<Var<'g>> {
        let qk = tgt.add(pos)?;
        let tgt = self.norm1.forward(p, tgt.add(self.self_attn.forward(p, qk, tgt)?)?)?;
        let query = tgt.add(pos)?;
        let tgt = self.norm2.forward(p, tgt.add(self.cross_attn.forward(p, query, refs, memory, table)?)?)?;
        self.norm3.forward(p, tgt.add(self.ffn.forward(p, tgt)?)?)
    }
}

/// Output of the transformer for one image.
#[derive(Clone, Copy, Debug)]
pub struct Decoded<'g> {
    /// Object features `[N, D]`.
    pub objects: Var<'g>,
    /// Reference points `[N, 2]` in `[0,1]`.
    pub refs: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub query_embed: ParamId,
    pub query_pos: ParamId,
    ref_proj: Linear,
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, levels: usize, rng: &mut R) -> Self {
        let (n, d) = (cfg.num_queries, cfg.width);
        Decoder {
            query_embed: store.add("transformer.query_embed", Tensor::randn(&[n, d], 1.0, rng)),
            query_pos: store.add("transformer.query_pos", Tensor::randn(&[n, d], 1.0, rng)),
            ref_proj: Linear::new(store, "transformer.ref_proj", d, 2, rng),
            layers: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(store, &format!("transformer.decoder.{i}"), cfg, levels, rng))
                .collect(),
        }
    }

    pub fn reference_points<'g>(&self, p: &Bindings<'g>, pos: Var<'g>) -> Result<Var<'g>> {
        Ok(self.ref_proj.forward(p, pos)?.sigmoid())
    }

    /// Decodes explicit query content `tgt` and positions `pos`, both `[N,D]`.
    pub fn forward_queries<'g>(
        &self,
        p: &Bindings<'g>,
        mut tgt: Var<'g>,
        pos: Var<'g>,
        memory: Var<'g>,
        table: &LevelTable,
    ) -> Result<Decoded<'g>> {
        let refs = self.reference_points(p, pos)?;
        for layer in &self.layers {
            tgt = layer.forward(p, tgt, pos, refs, memory, table)?;
        }
        Ok(Decoded { objects: tgt, refs })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, memory: Var<'g>, table: &LevelTable) -> Result<Decoded<'g>> {
        self.forward_queries(p, p.get(self.query_embed), p.get(self.query_pos), memory, table)
    }
}

/// Encoder plus decoder over pyramid levels `P3..P6`.
#[derive(Clone, Debug)]
pub struct DeformableTransformer {
    level_embed: Vec<ParamId>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Decoder,
    width: usize,
}

/// Number of pyramid levels the transformer attends to.
pub const LEVELS: usize = 4;

impl DeformableTransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let level_embed = (0..LEVELS)
            .map(|l| store.add(format!("transformer.level_embed.{l}"), Tensor::randn(&[cfg.width], 1.0, rng)))
            .collect();
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("transformer.encoder.{i}"), cfg, LEVELS, rng))
            .collect();
        let decoder = Decoder::new(store, cfg, LEVELS, rng);
        DeformableTransformer { level_embed, encoder, decoder, width: cfg.width }
    }

    /// Token-major positional encodings for the given level shapes: the sine
    /// encoding of each level plus that level's learned embedding.
    pub fn encodings<'g>(&self, p: &Bindings<'g>, shapes: &[(usize, usize)]) -> Result<Vec<Var<'g>>> {
        shapes
            .iter()
            .zip(&self.level_embed)
            .map(|(&(h, w), &embed)| {
                let sine = sine_encoding(self.width, h, w)?.reshape(&[self.width, h * w])?.transpose2d();
                p.constant(sine).add_row(p.get(embed))
            })
            .collect()
    }

    pub fn encode<'g>(&self, p: &Bindings<'g>, levels: &[Var<'g>]) -> Result<(Var<'g>, LevelTable)> {
        if levels.len() != LEVELS {
            return Err(Error::shape("transformer", format!("expected {LEVELS} levels, got {}", levels.len())));
        }
        let shapes: Vec<(usize, usize)> = levels.iter().map(|v| (v.shape()[1], v.shape()[2])).collect();
        let (mut memory, table) = flatten_pyramid(levels, &self.encodings(p, &shapes)?)?;
        let refs = p.constant(table.token_centers());
        for layer in &self.encoder {
            memory = layer.forward(p, memory, refs, &table)?;
        }
        Ok((memory, table))
    }

    /// Runs encoder and decoder on `[P3, P4, P5, P6]`.
    pub fn forward<'g>(&self, p: &Bindings<'g>, levels: &[Var<'g>]) -> Result<Decoded<'g>> {
        let (memory, table) = self.encode(p, levels)?;
        self.decoder.forward(p, memory, &table)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Graph;

    fn pyramid<'g>(g: &'g Graph, d: usize, sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Var<'g>> {
        sizes.iter().map(|&s| g.constant(Tensor::randn(&[d, s, s], 1.0, rng))).collect()
    }

    #[test]
    fn sine_encoding_is_bounded_and_structured() {
        let e = sine_encoding(8, 3, 5).unwrap();
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Row channels are constant along x, column channels along y.
        for x in 1..5 {
            assert_eq!(e.at(&[0, 1, x]), e.at(&[0, 1, 0]));
        }
        for y in 1..3 {
            assert_eq!(e.at(&[5, y, 2]), e.at(&[5, 0, 2]));
        }
        let arg = 2.0 * PI * 1.5 / 3.0;
        assert!((e.at(&[0, 1, 0]) - arg.sin()).abs() < 1e-15);
        assert!((e.at(&[1, 1, 0]) - arg.cos()).abs() < 1e-15);
        let arg2 = arg / POS_TEMPERATURE.powf(0.5);
        assert!((e.at(&[2, 1, 0]) - arg2.sin()).abs() < 1e-15);
        assert!(sine_encoding(6, 2, 2).is_err());
    }

    #[test]
    fn level_table_round_trips() {
        let t = LevelTable::new(vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(t.tokens(), 85);
        for token in 0..85 {
            let (l, x, y) = t.locate(token).unwrap();
            assert_eq!(t.index(l, x, y), Some(token));
        }
        assert_eq!(t.locate(85), None);
        assert_eq!(t.index(1, 4, 0), None);
        let c = t.token_centers();
        assert_eq!((c.at(&[64, 0]), c.at(&[64, 1])), (0.125, 0.125));
        assert_eq!((c.at(&[84, 0]), c.at(&[84, 1])), (0.5, 0.5));
    }

    #[test]
    fn flatten_with_zero_encodings_is_plain_flattening() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = pyramid(&g, 4, &[8, 4, 2, 1], &mut rng);
        let zeros: Vec<Var<'_>> = [64, 16, 4, 1].iter().map(|&n| g.constant(Tensor::zeros(&[n, 4]))).collect();
        let (mem, table) = flatten_pyramid(&levels, &zeros).unwrap();
        assert_eq!(mem.shape(), vec![85, 4]);
        for token in 0..85 {
            let (l, x, y) = table.locate(token).unwrap();
            for c in 0..4 {
                assert_eq!(mem.value().at(&[token, c]), levels[l].value().at(&[c, y, x]));
            }
        }
        assert!(flatten_pyramid(&levels[..3], &zeros).is_err());
    }

    fn msda(d: usize, heads: usize, levels: usize, points: usize) -> (ParamStore, MsDeformAttn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MsDeformAttn::new(&mut store, "a", d, heads, levels, points, &mut rng);
        (store, m)
    }

    #[test]
    fn degenerate_attention_is_projected_bilinear_sampling() {
        for heads in [1, 2] {
            let (mut store, m) = msda(4, heads, 1, 1);
            // Zero offsets: clear the grid-initialized bias.
            store.get_mut(m.sampling_offsets.bias).data_mut().fill(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let g = Graph::new();
            let p = Bindings::new(&g, &store, false);
            let feature = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
            let table = LevelTable::new(vec![(5, 6)]);
            let input = to_tokens(g.constant(feature)).unwrap();
            let query = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
            let refs_t = Tensor::uniform(&[3, 2], 0.0, 1.0, &mut rng);
            let refs = g.constant(refs_t.clone());
            let out = m.forward(&p, query, refs, input, &table).unwrap();

            // Oracle: project values, sample the map at each reference point, project out.
            let value = m.value_proj.forward(&p, input).unwrap();
            let value_map = value.transpose().unwrap().reshape(&[4, 5, 6]).unwrap();
            let sampled = value_map.bilinear_sample(g.constant(refs_t)).unwrap();
            let expect = m.out_proj.forward(&p, sampled).unwrap();
            let diff =
                out.value().data().iter().zip(expect.value().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "heads={heads}: {diff}");
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let (mut store, m) = msda(8, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        *store.get_mut(m.attention_weights.weight) = Tensor::randn(&[8, 24], 2.0, &mut rng);
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let w = m.weights(&p, g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng))).unwrap();
        let w = w.value();
        for q in 0..5 {
            for h in 0..2 {
                let row = &w.data()[q * 24 + h * 12..q * 24 + (h + 1) * 12];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_initialized_offsets_scale_by_level_size() {
        let (store, m) = msda(4, 2, 2, 2);
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let table = LevelTable::new(vec![(4, 8), (2, 2)]);
        let refs = g.constant(Tensor::new(&[1, 2], vec![0.5, 0.25]).unwrap());
        let loc = m.locations(&p, g.constant(Tensor::zeros(&[1, 4])), refs, &table).unwrap();
        let loc = loc.value();
        // head 0 points along +x: level 0 (w=8), point 1 → offset 2 px.
        assert!((loc.data()[2] - (0.5 + 2.0 / 8.0)).abs() < 1e-15);
        assert!((loc.data()[3] - 0.25).abs() < 1e-15);
        // head 1 points along -x: level 1 (w=2), point 0 → offset -1 px.
        let i = ((1 * 2 + 1) * 2) * 2;
        assert!((loc.data()[i] - (0.5 - 0.5)).abs() < 1e-15);
    }

    fn model(cfg: &ModelConfig) -> (ParamStore, DeformableTransformer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = DeformableTransformer::new(&mut store, cfg, &mut rng);
        (store, t)
    }

    #[test]
    fn encoder_preserves_shape_and_zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig { width: 8, enc_layers: 2, ..ModelConfig::default() };
        let (store, t) = model(&cfg);
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let levels = pyramid(&g, 8, &[8, 4, 2, 1], &mut rng);
        let (mem, table) = t.encode(&p, &levels).unwrap();
        assert_eq!(mem.shape(), vec![85, 8]);
        assert!(mem.value().is_finite());

        let cfg0 = ModelConfig { enc_layers: 0, ..cfg };
        let (store0, t0) = model(&cfg0);
        let p0 = Bindings::new(&g, &store0, false);
        let (mem0, _) = t0.encode(&p0, &levels).unwrap();
        let (flat, _) = flatten_pyramid(&levels, &t0.encodings(&p0, &table.shapes).unwrap()).unwrap();
        assert_eq!(*mem0.value(), *flat.value());
    }

    #[test]
    fn decoder_emits_n_objects_with_unit_square_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig { width: 8, num_queries: 5, ..ModelConfig::default() };
        let (store, t) = model(&cfg);
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let out = t.forward(&p, &pyramid(&g, 8, &[4, 2, 1, 1], &mut rng)).unwrap();
        assert_eq!(out.objects.shape(), vec![5, 8]);
        assert_eq!(out.refs.shape(), vec![5, 2]);
        assert!(out.refs.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn decoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig { width: 8, num_queries: 6, ..ModelConfig::default() };
        let (store, t) = model(&cfg);
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let (memory, table) = t.encode(&p, &pyramid(&g, 8, &[8, 4, 2, 1], &mut rng)).unwrap();
        let tgt = p.get(t.decoder.query_embed);
        let pos = p.get(t.decoder.query_pos);
        let base = t.decoder.forward_queries(&p, tgt, pos, memory, &table).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = t
            .decoder
            .forward_queries(&p, tgt.gather_rows(&perm).unwrap(), pos.gather_rows(&perm).unwrap(), memory, &table)
            .unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(permuted.objects.value().at(&[i, c]), base.objects.value().at(&[src, c]));
            }
            for c in 0..2 {
                assert_eq!(permuted.refs.value().at(&[i, c]), base.refs.value().at(&[src, c]));
            }
        }
    }
}
