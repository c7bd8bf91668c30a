//! Genomic and histology encoders mapping both modalities to the embedding width.

use rand::Rng;

use crate::data::{GenePartition, Subspace};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tensor, Var};

pub const GENE_HIDDEN: usize = 128;

/// Two-layer self-normalizing feed-forward network over one gene subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct GenomicEncoder {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl GenomicEncoder {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("gene subspace is empty".into()));
        }
        Ok(GenomicEncoder {
            prefix: prefix.into(),
            in_dim,
            hidden: GENE_HIDDEN,
            out_dim,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(rng, &format!("{}.l1", self.prefix), self.in_dim, self.hidden);
        store.init_linear(rng, &format!("{}.l2", self.prefix), self.hidden, self.out_dim);
    }

    /// `[B, in_dim]` subspace expression to `[B, out_dim]` embeddings.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (w1, b1) = bound.linear(&format!("{}.l1", self.prefix))?;
        let (w2, b2) = bound.linear(&format!("{}.l2", self.prefix))?;
        x.linear(w1, Some(b1))?.selu()?.linear(w2, Some(b2))?.selu()
    }
}

/// Selects one subspace's columns from a `[B, G]` expression matrix and encodes them.
pub fn encode_genes<'t>(
    encoder: &GenomicEncoder,
    bound: &Bound<'t>,
    genes: &Tensor,
    partition: &GenePartition,
    subspace: Subspace,
) -> Result<Var<'t>> {
    let columns = partition.indices(subspace);
    if columns.is_empty() {
        return Err(Error::Config(format!("{subspace:?} gene subspace is empty")));
    }
    if columns.len() != encoder.in_dim {
        return Err(Error::Dimension(format!(
            "{subspace:?} subspace has {} genes, encoder expects {}",
            columns.len(),
            encoder.in_dim
        )));
    }
    let x = bound.tape().constant(genes.select_columns(columns)?);
    encoder.forward(bound, x)
}

/// One affine map `C_in -> C` shared by every grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HistologyProjector {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl HistologyProjector {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        HistologyProjector {
            prefix: prefix.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(rng, &self.prefix, self.in_channels, self.out_channels);
    }

    /// `[B, H, W, C_in]` to `[B, H, W, C]`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let shape = grid.shape();
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(Error::Dimension(format!(
                "histology grid {shape:?} does not have {} channels",
                self.in_channels
            )));
        }
        let (w, b) = bound.linear(&self.prefix)?;
        grid.linear(w, Some(b))
    }
}
