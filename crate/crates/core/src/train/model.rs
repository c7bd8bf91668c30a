use serde::{Deserialize, Serialize};

use crate::data::{GenePartition, Manifest, Subspace, SURVIVAL_BINS};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, SubspaceFusionOutput, SubspaceStream};
use crate::objectives::Task;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tensor, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASSIFIER: &str = "cls";

/// Everything needed to rebuild a [`Model`] without the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub fusion: FusionConfig,
    pub n_tumour_genes: usize,
    pub n_tme_genes: usize,
    pub hist_channels: usize,
    pub n_outputs: usize,
}

impl ModelSpec {
    pub fn for_dataset(task: Task, fusion: FusionConfig, m: &Manifest) -> Result<Self> {
        if (m.height, m.width) != (fusion.grid_h, fusion.grid_w) {
            return Err(Error::Config(format!(
                "fusion grid {}x{} does not match data grid {}x{}",
                fusion.grid_h, fusion.grid_w, m.height, m.width
            )));
        }
        let n_outputs = match task {
            Task::Diagnosis => m.n_diagnosis,
            Task::Grading => m.n_grade,
            Task::Survival => SURVIVAL_BINS,
        };
        Ok(ModelSpec {
            task,
            fusion,
            n_tumour_genes: m.n_tumour_genes,
            n_tme_genes: m.n_tme_genes,
            hist_channels: m.channels,
            n_outputs,
        })
    }

    pub fn check_dataset(&self, m: &Manifest) -> Result<()> {
        let expected = ModelSpec::for_dataset(self.task, self.fusion.clone(), m)?;
        if &expected != self {
            return Err(Error::Config(format!(
                "dataset dimensions do not match the model: {expected:?} vs {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two subspace streams feeding a shared two-layer classifier over
/// `concat(z_t, z_e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub tumour: SubspaceStream,
    pub tme: SubspaceStream,
}

pub struct Forward<'t> {
    pub tumour: SubspaceFusionOutput<'t>,
    pub tme: SubspaceFusionOutput<'t>,
    pub logits: Var<'t>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let f = &spec.fusion;
        Ok(Model {
            tumour: SubspaceStream::new(Subspace::Tumour, f.clone(), spec.n_tumour_genes, spec.hist_channels)?,
            tme: SubspaceStream::new(Subspace::Tme, f.clone(), spec.n_tme_genes, spec.hist_channels)?,
            spec,
        })
    }

    pub fn stream(&self, subspace: Subspace) -> &SubspaceStream {
        match subspace {
            Subspace::Tumour => &self.tumour,
            Subspace::Tme => &self.tme,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.tumour.init(&mut store, &mut rng);
        self.tme.init(&mut store, &mut rng);
        let c = self.spec.fusion.embed_dim;
        store.init_linear(&mut rng, &format!("{CLASSIFIER}.l1"), 2 * c, c);
        store.init_linear(&mut rng, &format!("{CLASSIFIER}.l2"), c, self.spec.n_outputs);
        store
    }

    /// Classifier `D` on the concatenated branch embeddings.
    pub fn classify<'t>(&self, bound: &Bound<'t>, z_t: Var<'t>, z_e: Var<'t>) -> Result<Var<'t>> {
        let (w1, b1) = bound.linear(&format!("{CLASSIFIER}.l1"))?;
        let (w2, b2) = bound.linear(&format!("{CLASSIFIER}.l2"))?;
        Var::concat(&[z_t, z_e], 1)?
            .linear(w1, Some(b1))?
            .relu()?
            .linear(w2, Some(b2))
    }

    /// `D` applied to one branch with the other branch's half zeroed.
    pub fn classify_branch<'t>(&self, bound: &Bound<'t>, branch: Subspace, z: &Tensor) -> Result<Var<'t>> {
        let tape = bound.tape();
        let live = tape.constant(z.clone());
        let zero = tape.constant(Tensor::zeros(z.shape()));
        match branch {
            Subspace::Tumour => self.classify(bound, live, zero),
            Subspace::Tme => self.classify(bound, zero, live),
        }
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        genes: &Tensor,
        patches: &Tensor,
        partition: &GenePartition,
        with_consistency: bool,
    ) -> Result<Forward<'t>> {
        let tumour = self.tumour.run(bound, genes, patches, partition, with_consistency)?;
        let tme = self.tme.run(bound, genes, patches, partition, with_consistency)?;
        let logits = self.classify(bound, tumour.fused, tme.fused)?;
        Ok(Forward { tumour, tme, logits })
    }
}
