//! Knowledge-driven subspace fusion.
//!
//! Each subspace stream fuses its gene embedding with the histology grid into
//! a teacher map, predicts bounded sampling offsets from it, bilinearly
//! resamples the histology features at the shifted reference points, and
//! attends from teacher queries to the resampled keys/values. A Gram-matrix
//! consistency loss ties the batch structure of the sampling points to that
//! of the gene embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GenePartition, Subspace};
use crate::encoders::{encode_genes, GenomicEncoder, HistologyProjector};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub heads: usize,
    pub embed_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Upper bound on each offset component, in normalized coordinates.
    pub offset_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 4,
            embed_dim: 64,
            grid_h: 7,
            grid_w: 7,
            offset_scale: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must evenly divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale <= 1.0) {
            return Err(Error::Config(format!(
                "offset_scale must be in (0, 1], got {}",
                self.offset_scale
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Cell-centre reference points `[H, W, 2]` in `[-1, 1]`, stored `(x, y)`.
pub fn reference_grid(h: usize, w: usize) -> Tensor {
    let centre = |i: usize, n: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(centre(x, w));
            data.push(centre(y, h));
        }
    }
    Tensor::from_parts(vec![h, w, 2], data)
}

/// Broadcasts `[B, C]` gene features over the grid, concatenates them in front
/// of `[B, H, W, C]` histology features and maps `2C -> C`.
pub fn fuse_teacher<'t>(
    gene_feat: Var<'t>,
    hist_feat: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<Var<'t>> {
    let hs = hist_feat.shape();
    let gs = gene_feat.shape();
    let (&[b, h, w, c], &[gb, gc]) = (&hs[..], &gs[..]) else {
        return Err(Error::Dimension(format!(
            "fuse_teacher expects [B,C] and [B,H,W,C], got {gs:?} and {hs:?}"
        )));
    };
    if b != gb || c != gc {
        return Err(Error::Dimension(format!(
            "gene features {gs:?} do not match histology {hs:?}"
        )));
    }
    let genes = gene_feat.expand(1, h * w)?.reshape(&[b, h, w, c])?;
    Var::concat(&[genes, hist_feat], 3)?.linear(weight, Some(bias))
}

/// Offset head weights: two 3x3 convolutions.
pub struct OffsetHead<'t> {
    pub conv1: (Var<'t>, Var<'t>),
    pub conv2: (Var<'t>, Var<'t>),
}

/// `[B, H, W, C]` teacher to `[B, H, W, 2]` offsets bounded by `scale`.
pub fn generate_offsets<'t>(teacher: Var<'t>, head: &OffsetHead<'t>, scale: f64) -> Result<Var<'t>> {
    let (w1, b1) = head.conv1;
    let (w2, b2) = head.conv2;
    teacher.conv3x3(w1, b1)?.relu()?.conv3x3(w2, b2)?.tanh()?.scale(scale)
}

/// Samples `[B, H, W, C]` histology features at `[B, Hg, Wg, 2]` points and
/// flattens the result to `[B, Hg*Wg, C]` tokens.
pub fn deform_sample<'t>(hist_feat: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let ps = points.shape();
    let &[b, gh, gw, 2] = &ps[..] else {
        return Err(Error::Dimension(format!("sample points must be [B,H,W,2], got {ps:?}")));
    };
    hist_feat.bilinear_sample(points.reshape(&[b, gh * gw, 2])?)
}

/// Query/key/value/output projections of one attention block.
pub struct AttentionWeights<'t> {
    pub q: (Var<'t>, Var<'t>),
    pub k: (Var<'t>, Var<'t>),
    pub v: (Var<'t>, Var<'t>),
    pub o: (Var<'t>, Var<'t>),
}

/// Splits `[B, N, C]` into heads as `[B*M, N, d]`.
fn split_heads<'t>(x: Var<'t>, b: usize, n: usize, heads: usize, d: usize) -> Result<Var<'t>> {
    x.reshape(&[b, n, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, d])
}

/// Multi-head attention from teacher queries to deformed keys/values, then
/// `W_o`, then a mean over the `N` query tokens: `[B, N, C] -> [B, C]`.
pub fn cross_attention<'t>(
    teacher: Var<'t>,
    deformed: Var<'t>,
    weights: &AttentionWeights<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    let ts = teacher.shape();
    let &[b, n, c] = &ts[..] else {
        return Err(Error::Dimension(format!("teacher tokens must be [B,N,C], got {ts:?}")));
    };
    let ds = deformed.shape();
    let &[db, nk, dc] = &ds[..] else {
        return Err(Error::Dimension(format!("deformed tokens must be [B,N,C], got {ds:?}")));
    };
    if db != b || dc != c {
        return Err(Error::Dimension(format!("teacher {ts:?} vs deformed {ds:?}")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    let d = c / heads;
    let q = teacher.linear(weights.q.0, Some(weights.q.1))?;
    let k = deformed.linear(weights.k.0, Some(weights.k.1))?;
    let v = deformed.linear(weights.v.0, Some(weights.v.1))?;

    let q = split_heads(q, b, n, heads, d)?;
    let v = split_heads(v, b, nk, heads, d)?;
    let k_t = k
        .reshape(&[b, nk, heads, d])?
        .permute(&[0, 2, 3, 1])?
        .reshape(&[b * heads, d, nk])?;

    let attn = q.bmm(k_t)?.scale(1.0 / (d as f64).sqrt())?.softmax(2)?;
    let z = attn
        .bmm(v)?
        .reshape(&[b, heads, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, c])?;
    z.linear(weights.o.0, Some(weights.o.1))?.mean_axis(1)
}

/// `(1/B) * ||S(gene_emb) - S(points)||_F` with `S` the cosine Gram matrix
/// over the batch; points are flattened to `[B, 2*H*W]`.
pub fn ge_con_loss<'t>(gene_emb: Var<'t>, sample_points: Var<'t>) -> Result<Var<'t>> {
    let gs = gene_emb.shape();
    let ps = sample_points.shape();
    let b = gs.first().copied().unwrap_or(0);
    if gs.len() != 2 || ps.first() != Some(&b) {
        return Err(Error::Dimension(format!(
            "ge_con_loss needs [B,D] embeddings and [B,...] points, got {gs:?} and {ps:?}"
        )));
    }
    let flat = sample_points.reshape(&[b, ps[1..].iter().product()])?;
    gene_emb
        .gram_matrix()?
        .sub(flat.gram_matrix()?)?
        .frobenius_norm()?
        .scale(1.0 / b as f64)
}

/// Everything one stream produces for a batch.
pub struct SubspaceFusionOutput<'t> {
    pub gene_emb: Var<'t>,
    pub teacher: Var<'t>,
    pub offsets: Var<'t>,
    pub sample_points: Var<'t>,
    pub fused: Var<'t>,
    /// Consistency loss; absent when not requested.
    pub ge_con: Option<Var<'t>>,
}

/// One parameter-disjoint fusion stream; all of its parameters live under
/// the `t.` or `e.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceStream {
    pub subspace: Subspace,
    pub config: FusionConfig,
    pub genes: GenomicEncoder,
    pub histology: HistologyProjector,
}

impl SubspaceStream {
    pub fn new(subspace: Subspace, config: FusionConfig, n_genes: usize, hist_channels: usize) -> Result<Self> {
        config.validate()?;
        let p = subspace.tag();
        Ok(SubspaceStream {
            genes: GenomicEncoder::new(format!("{p}.genes"), n_genes, config.embed_dim)?,
            histology: HistologyProjector::new(format!("{p}.hist"), hist_channels, config.embed_dim),
            subspace,
            config,
        })
    }

    pub fn prefix(&self) -> &'static str {
        self.subspace.tag()
    }

    fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix())
    }

    /// Random init; the final offset convolution starts at zero so training
    /// begins from the undeformed reference grid.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.config.embed_dim;
        self.genes.init(store, rng);
        self.histology.init(store, rng);
        store.init_linear(rng, &self.key("teacher"), 2 * c, c);
        store.init_linear(rng, &self.key("offset.conv1"), 9 * c, c);
        store.init_zero_linear(&self.key("offset.conv2"), 9 * c, 2);
        for proj in ["q", "k", "v", "o"] {
            store.init_linear(rng, &self.key(&format!("attn.{proj}")), c, c);
        }
    }

    pub fn attention<'t>(&self, bound: &Bound<'t>) -> Result<AttentionWeights<'t>> {
        Ok(AttentionWeights {
            q: bound.linear(&self.key("attn.q"))?,
            k: bound.linear(&self.key("attn.k"))?,
            v: bound.linear(&self.key("attn.v"))?,
            o: bound.linear(&self.key("attn.o"))?,
        })
    }

    pub fn offset_head<'t>(&self, bound: &Bound<'t>) -> Result<OffsetHead<'t>> {
        Ok(OffsetHead {
            conv1: bound.linear(&self.key("offset.conv1"))?,
            conv2: bound.linear(&self.key("offset.conv2"))?,
        })
    }

    /// Runs the full stream on a batch: `genes` is `[B, G]`, `patches` is
    /// `[B, H, W, C_in]`. The consistency loss is only built when
    /// `with_consistency` is set.
    pub fn run<'t>(
        &self,
        bound: &Bound<'t>,
        genes: &Tensor,
        patches: &Tensor,
        partition: &GenePartition,
        with_consistency: bool,
    ) -> Result<SubspaceFusionOutput<'t>> {
        let cfg = &self.config;
        let ps = patches.shape();
        if ps.len() != 4 || ps[1] != cfg.grid_h || ps[2] != cfg.grid_w {
            return Err(Error::Dimension(format!(
                "patch grid {ps:?} does not match fusion grid {}x{}",
                cfg.grid_h, cfg.grid_w
            )));
        }
        let b = ps[0];
        let tape = bound.tape();

        let gene_emb = encode_genes(&self.genes, bound, genes, partition, self.subspace)?;
        let hist = self.histology.forward(bound, tape.constant(patches.clone()))?;
        let (tw, tb) = bound.linear(&self.key("teacher"))?;
        let teacher = fuse_teacher(gene_emb, hist, tw, tb)?;
        let offsets = generate_offsets(teacher, &self.offset_head(bound)?, cfg.offset_scale)?;

        let grid = reference_grid(cfg.grid_h, cfg.grid_w);
        let grid = Tensor::stack(&vec![grid; b])?;
        let sample_points = tape.constant(grid).add(offsets)?.clamp(-1.0, 1.0)?;

        let deformed = deform_sample(hist, sample_points)?;
        let n = cfg.tokens();
        let tokens = teacher.reshape(&[b, n, cfg.embed_dim])?;
        let fused = cross_attention(tokens, deformed, &self.attention(bound)?, cfg.heads)?;
        let ge_con = if with_consistency {
            Some(ge_con_loss(gene_emb, sample_points)?)
        } else {
            None
        };
        Ok(SubspaceFusionOutput {
            gene_emb,
            teacher,
            offsets,
            sample_points,
            fused,
            ge_con,
        })
    }
}
