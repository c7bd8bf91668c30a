//! Synthetic paired genomics/histology cohorts and their on-disk format.
//!
//! A dataset directory holds four files:
//!
//! * `manifest.json`: dimensions, class counts, split sizes, survival quartile
//!   boundaries, seed and format version.
//! * `genes.csv`: header `sample_id,g0,...,g{G-1}`, then a `#partition` line
//!   tagging every gene column `t` (tumour) or `e` (microenvironment), then one
//!   row per sample.
//! * `patches.bin`: magic `SFPG`, little-endian `u32` n_samples, H, W, C, then
//!   per sample a 32-byte zero-padded id followed by `H*W*C` little-endian
//!   `f32` values in row-major order.
//! * `labels.csv`: header `sample_id,diagnosis,grade,time,event,bin`.
//!
//! Samples are stored in split order: the first `splits.train` rows are the
//! training split, then validation, then test.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const SURVIVAL_BINS: usize = 4;

const PATCH_MAGIC: &[u8; 4] = b"SFPG";
const ID_BYTES: usize = 32;
const MANIFEST: &str = "manifest.json";
const GENES: &str = "genes.csv";
const PATCHES: &str = "patches.bin";
const LABELS: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subspace {
    Tumour,
    Tme,
}

impl Subspace {
    pub const BOTH: [Subspace; 2] = [Subspace::Tumour, Subspace::Tme];

    pub fn tag(self) -> &'static str {
        match self {
            Subspace::Tumour => "t",
            Subspace::Tme => "e",
        }
    }
}

/// Disjoint tumour/TME gene index sets covering `0..n_genes`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenePartition {
    tumour: Vec<usize>,
    tme: Vec<usize>,
}

impl GenePartition {
    pub fn new(tumour: Vec<usize>, tme: Vec<usize>, n_genes: usize) -> Result<Self> {
        let mut seen = vec![false; n_genes];
        for &i in tumour.iter().chain(&tme) {
            if i >= n_genes {
                return Err(Error::Config(format!("gene index {i} out of range for {n_genes}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("gene {i} assigned to both subspaces")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("gene {missing} is in neither subspace")));
        }
        Ok(GenePartition { tumour, tme })
    }

    /// First `n_tumour` genes tumour-related, the rest TME-related.
    pub fn contiguous(n_tumour: usize, n_genes: usize) -> Result<Self> {
        Self::new((0..n_tumour).collect(), (n_tumour..n_genes).collect(), n_genes)
    }

    pub fn indices(&self, subspace: Subspace) -> &[usize] {
        match subspace {
            Subspace::Tumour => &self.tumour,
            Subspace::Tme => &self.tme,
        }
    }

    pub fn n_genes(&self) -> usize {
        self.tumour.len() + self.tme.len()
    }

    fn tags(&self) -> Vec<Subspace> {
        let mut tags = vec![Subspace::Tme; self.n_genes()];
        for &i in &self.tumour {
            tags[i] = Subspace::Tumour;
        }
        tags
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenomicProfile {
    pub sample_id: String,
    pub values: Vec<f64>,
}

/// Histology patch features on an `H x W` grid with `C` channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureGrid {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub time: f64,
    /// `true` when the event was observed (uncensored).
    pub event: bool,
    pub bin: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleLabel {
    pub sample_id: String,
    pub diagnosis: usize,
    pub grade: usize,
    pub survival: SurvivalRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_samples: usize,
    pub n_genes: usize,
    pub n_tumour_genes: usize,
    pub n_tme_genes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_diagnosis: usize,
    pub n_grade: usize,
    /// Survival bin boundaries: bin `j` holds times in `(q[j-1], q[j]]`.
    pub quartiles: [f64; 3],
    pub splits: SplitSizes,
}

impl Manifest {
    pub fn survival_bin(&self, time: f64) -> usize {
        survival_bin(&self.quartiles, time)
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        let s = self.splits;
        match split {
            Split::Train => 0..s.train,
            Split::Val => s.train..s.train + s.val,
            Split::Test => s.train + s.val..s.train + s.val + s.test,
        }
    }
}

fn survival_bin(quartiles: &[f64; 3], time: f64) -> usize {
    quartiles.iter().filter(|&&q| time > q).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_genes: usize,
    pub n_tumour_genes: usize,
    pub n_tme_genes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_diagnosis: usize,
    pub n_grade: usize,
    /// Norm of each planted class prototype in units of the per-feature
    /// noise standard deviation, for genes and histology alike.
    pub snr: f64,
    /// Fraction of samples whose TME latent disagrees with the class the
    /// tumour latent maps to.
    pub conflict_strength: f64,
    /// Both subspaces encode the diagnosis latent with equal strength.
    pub symmetric: bool,
    pub censor_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 600,
            n_genes: 420,
            n_tumour_genes: 59,
            n_tme_genes: 361,
            height: 7,
            width: 7,
            channels: 64,
            n_diagnosis: 4,
            n_grade: 4,
            snr: 5.0,
            conflict_strength: 0.0,
            symmetric: false,
            censor_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_tumour_genes + self.n_tme_genes != self.n_genes {
            return err(format!(
                "tumour ({}) + TME ({}) genes must sum to {}",
                self.n_tumour_genes, self.n_tme_genes, self.n_genes
            ));
        }
        if self.n_tumour_genes == 0 || self.n_tme_genes == 0 {
            return err("both gene subspaces must be non-empty".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return err("grid dimensions must be positive".into());
        }
        if self.n_diagnosis < 2 || self.n_grade < 2 {
            return err("need at least two diagnosis and grade classes".into());
        }
        if self.n_samples < 20 {
            return err(format!("n_samples {} too small to split", self.n_samples));
        }
        if !(0.0..=1.0).contains(&self.conflict_strength) || !(0.0..1.0).contains(&self.censor_fraction) {
            return err("conflict_strength must be in [0,1] and censor_fraction in [0,1)".into());
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return err(format!("snr must be finite and non-negative, got {}", self.snr));
        }
        if self.symmetric && self.n_grade != self.n_diagnosis {
            return err("symmetric datasets need n_grade == n_diagnosis".into());
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let n = self.n_samples;
        let train = (n as f64 * 0.7).round() as usize;
        let val = (n as f64 * 0.15).round() as usize;
        SplitSizes {
            train,
            val,
            test: n - train - val,
        }
    }
}

/// Planted per-sample latents, kept for probing tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latents {
    pub tumour_class: usize,
    pub tme_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub partition: GenePartition,
    pub genes: Vec<GenomicProfile>,
    pub patches: Vec<PatchFeatureGrid>,
    pub labels: Vec<SampleLabel>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random direction scaled to norm `length`.
fn prototype(rng: &mut ChaCha8Rng, n: usize, length: f64) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x *= length / norm);
    v
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generates a cohort. Pure function of `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    generate_with_latents(config, seed).map(|(d, _)| d)
}

pub fn generate_with_latents(config: &SynthConfig, seed: u64) -> Result<(Dataset, Vec<Latents>)> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tme_classes = if c.symmetric { c.n_diagnosis } else { c.n_grade };

    let gene_t: Vec<Vec<f64>> = (0..c.n_diagnosis)
        .map(|_| prototype(&mut rng, c.n_tumour_genes, c.snr))
        .collect();
    let gene_e: Vec<Vec<f64>> = (0..tme_classes)
        .map(|_| prototype(&mut rng, c.n_tme_genes, c.snr))
        .collect();
    let hist_t: Vec<Vec<f64>> = (0..c.n_diagnosis)
        .map(|_| prototype(&mut rng, c.channels, c.snr))
        .collect();
    let hist_e: Vec<Vec<f64>> = (0..tme_classes)
        .map(|_| prototype(&mut rng, c.channels, c.snr))
        .collect();

    let partition = GenePartition::contiguous(c.n_tumour_genes, c.n_genes)?;
    let mut genes = Vec::with_capacity(c.n_samples);
    let mut patches = Vec::with_capacity(c.n_samples);
    let mut latents = Vec::with_capacity(c.n_samples);
    let mut event_times = Vec::with_capacity(c.n_samples);

    for i in 0..c.n_samples {
        let sample_id = format!("S{i:05}");
        let tumour_class = rng.gen_range(0..c.n_diagnosis);
        let aligned = tumour_class * tme_classes / c.n_diagnosis;
        let tme_class = if rng.gen::<f64>() < c.conflict_strength {
            let other = rng.gen_range(0..tme_classes - 1);
            if other >= aligned {
                other + 1
            } else {
                other
            }
        } else {
            aligned
        };
        latents.push(Latents {
            tumour_class,
            tme_class,
        });

        let mut values = gaussian_vec(&mut rng, c.n_genes);
        for (v, p) in values[..c.n_tumour_genes].iter_mut().zip(&gene_t[tumour_class]) {
            *v += p;
        }
        for (v, p) in values[c.n_tumour_genes..].iter_mut().zip(&gene_e[tme_class]) {
            *v += p;
        }
        genes.push(GenomicProfile {
            sample_id: sample_id.clone(),
            values,
        });

        let mut grid = gaussian_vec(&mut rng, c.height * c.width * c.channels);
        for (proto, cls) in [(&hist_t, tumour_class), (&hist_e, tme_class)] {
            let cy = rng.gen_range(0..c.height) as f64;
            let cx = rng.gen_range(0..c.width) as f64;
            for y in 0..c.height {
                for x in 0..c.width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let weight = (-d2 / 2.0).exp();
                    let cell = &mut grid[(y * c.width + x) * c.channels..][..c.channels];
                    for (v, p) in cell.iter_mut().zip(&proto[cls]) {
                        *v += weight * p;
                    }
                }
            }
        }
        // Stored as f32 on disk; round now so save/load is exact.
        grid.iter_mut().for_each(|v| *v = *v as f32 as f64);
        patches.push(PatchFeatureGrid {
            sample_id,
            height: c.height,
            width: c.width,
            channels: c.channels,
            values: grid,
        });

        let risk = if c.symmetric {
            tumour_class as f64
        } else {
            tme_class as f64 + 0.5 * tumour_class as f64 / c.n_diagnosis as f64
        };
        let rate = 0.1 * (0.6 * risk).exp();
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        event_times.push(-u.ln() / rate);
    }

    let n_censored = (c.n_samples as f64 * c.censor_fraction).round() as usize;
    let mut order: Vec<usize> = (0..c.n_samples).collect();
    order.shuffle(&mut rng);
    let mut censored = vec![false; c.n_samples];
    for &i in &order[..n_censored] {
        censored[i] = true;
    }
    let times: Vec<f64> = event_times
        .iter()
        .zip(&censored)
        .map(|(&t, &cens)| if cens { rng.gen_range(0.0..t) } else { t })
        .collect();

    let splits = c.split_sizes();
    let mut train_uncensored: Vec<f64> = (0..splits.train)
        .filter(|&i| !censored[i])
        .map(|i| times[i])
        .collect();
    if train_uncensored.len() < 2 {
        return Err(Error::Config("too few uncensored training samples for quartiles".into()));
    }
    train_uncensored.sort_by(f64::total_cmp);
    let quartiles = [0.25, 0.5, 0.75].map(|q| quantile_sorted(&train_uncensored, q));

    let labels = (0..c.n_samples)
        .map(|i| SampleLabel {
            sample_id: genes[i].sample_id.clone(),
            diagnosis: latents[i].tumour_class,
            grade: if c.symmetric {
                latents[i].tumour_class
            } else {
                latents[i].tme_class
            },
            survival: SurvivalRecord {
                time: times[i],
                event: !censored[i],
                bin: survival_bin(&quartiles, times[i]),
            },
        })
        .collect();

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        n_samples: c.n_samples,
        n_genes: c.n_genes,
        n_tumour_genes: c.n_tumour_genes,
        n_tme_genes: c.n_tme_genes,
        height: c.height,
        width: c.width,
        channels: c.channels,
        n_diagnosis: c.n_diagnosis,
        n_grade: c.n_grade,
        quartiles,
        splits,
    };
    Ok((
        Dataset {
            manifest,
            partition,
            genes,
            patches,
            labels,
        },
        latents,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split_range(split).collect()
    }

    /// `[B, G]` expression matrix of the given samples.
    pub fn gene_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let g = self.manifest.n_genes;
        let mut data = Vec::with_capacity(indices.len() * g);
        for &i in indices {
            data.extend_from_slice(&self.genes[i].values);
        }
        Tensor::new(&[indices.len(), g], data)
    }

    /// `[B, H, W, C]` patch features of the given samples.
    pub fn patch_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let m = &self.manifest;
        let mut data = Vec::with_capacity(indices.len() * m.height * m.width * m.channels);
        for &i in indices {
            data.extend_from_slice(&self.patches[i].values);
        }
        Tensor::new(&[indices.len(), m.height, m.width, m.channels], data)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.manifest;

        let manifest = serde_json::to_string_pretty(m).expect("manifest serializes");
        write_file(&dir.join(MANIFEST), manifest.as_bytes())?;

        let mut genes = String::from("sample_id");
        for g in 0..m.n_genes {
            genes.push_str(&format!(",g{g}"));
        }
        genes.push_str("\n#partition");
        for tag in self.partition.tags() {
            genes.push(',');
            genes.push_str(tag.tag());
        }
        genes.push('\n');
        for p in &self.genes {
            genes.push_str(&p.sample_id);
            for v in &p.values {
                genes.push_str(&format!(",{v}"));
            }
            genes.push('\n');
        }
        write_file(&dir.join(GENES), genes.as_bytes())?;

        let cells = m.height * m.width * m.channels;
        let mut bin = Vec::with_capacity(20 + self.patches.len() * (ID_BYTES + 4 * cells));
        bin.extend_from_slice(PATCH_MAGIC);
        for v in [self.patches.len(), m.height, m.width, m.channels] {
            bin.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.patches {
            let mut id = [0u8; ID_BYTES];
            let bytes = p.sample_id.as_bytes();
            if bytes.len() > ID_BYTES {
                return Err(Error::Config(format!("sample id {:?} longer than 32 bytes", p.sample_id)));
            }
            id[..bytes.len()].copy_from_slice(bytes);
            bin.extend_from_slice(&id);
            for &v in &p.values {
                bin.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        write_file(&dir.join(PATCHES), &bin)?;

        let mut labels = String::from("sample_id,diagnosis,grade,time,event,bin\n");
        for l in &self.labels {
            let s = &l.survival;
            labels.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.sample_id,
                l.diagnosis,
                l.grade,
                s.time,
                u8::from(s.event),
                s.bin
            ));
        }
        write_file(&dir.join(LABELS), labels.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let raw = read_file(&dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(MANIFEST, format!("line {}", e.line()), e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                MANIFEST,
                "format_version",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        let s = manifest.splits;
        if s.train + s.val + s.test != manifest.n_samples {
            return Err(Error::format(MANIFEST, "splits", "split sizes do not sum to n_samples"));
        }
        if manifest.n_tumour_genes + manifest.n_tme_genes != manifest.n_genes {
            return Err(Error::format(MANIFEST, "n_genes", "partition sizes do not sum to n_genes"));
        }
        if !manifest.quartiles.iter().all(|q| q.is_finite()) {
            return Err(Error::format(MANIFEST, "quartiles", "non-finite quartile boundary"));
        }

        let (partition, genes) = load_genes(&dir.join(GENES), &manifest)?;
        let patches = load_patches(&dir.join(PATCHES), &manifest)?;
        let labels = load_labels(&dir.join(LABELS), &manifest)?;
        for ((g, p), l) in genes.iter().zip(&patches).zip(&labels) {
            if g.sample_id != p.sample_id || g.sample_id != l.sample_id {
                return Err(Error::format(
                    PATCHES,
                    format!("sample {}", g.sample_id),
                    "sample ids differ between files",
                ));
            }
        }
        Ok(Dataset {
            manifest,
            partition,
            genes,
            patches,
            labels,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&file_name(path), "0", "file is missing"),
        _ => Error::io(path, e),
    })
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_f64(file: &str, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::format(file, format!("line {line}"), format!("bad number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::format(file, format!("line {line}"), "non-finite value"));
    }
    Ok(v)
}

fn parse_usize(file: &str, line: usize, field: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::format(file, format!("line {line}"), format!("bad integer {field:?}")))
}

fn load_genes(path: &Path, m: &Manifest) -> Result<(GenePartition, Vec<GenomicProfile>)> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(GENES, "0", "not UTF-8"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(GENES, "line 1", "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"sample_id") {
        return Err(Error::format(GENES, "line 1", "header must start with sample_id"));
    }
    if cols.len() - 1 != m.n_genes {
        return Err(Error::format(
            GENES,
            "line 1",
            format!("manifest declares {} genes, header has {}", m.n_genes, cols.len() - 1),
        ));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("g{i}") {
            return Err(Error::format(GENES, "line 1", format!("column {} should be g{i}, got {c:?}", i + 1)));
        }
    }
    let tags_line = lines
        .next()
        .ok_or_else(|| Error::format(GENES, "line 2", "missing #partition line"))?;
    let tags: Vec<&str> = tags_line.split(',').collect();
    if tags.first() != Some(&"#partition") || tags.len() != cols.len() {
        return Err(Error::format(GENES, "line 2", "malformed #partition line"));
    }
    let (mut tumour, mut tme) = (Vec::new(), Vec::new());
    for (i, tag) in tags[1..].iter().enumerate() {
        match *tag {
            "t" => tumour.push(i),
            "e" => tme.push(i),
            other => {
                return Err(Error::format(GENES, "line 2", format!("gene {i} has tag {other:?}, expected t or e")))
            }
        }
    }
    if tumour.len() != m.n_tumour_genes || tme.len() != m.n_tme_genes {
        return Err(Error::format(
            GENES,
            "line 2",
            format!(
                "partition has {}/{} genes, manifest declares {}/{}",
                tumour.len(),
                tme.len(),
                m.n_tumour_genes,
                m.n_tme_genes
            ),
        ));
    }
    let partition = GenePartition::new(tumour, tme, m.n_genes)
        .map_err(|e| Error::format(GENES, "line 2", e.to_string()))?;

    let mut genes = Vec::with_capacity(m.n_samples);
    for (k, line) in lines.enumerate() {
        let line_no = k + 3;
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| parse_f64(GENES, line_no, f))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != m.n_genes {
            return Err(Error::format(
                GENES,
                format!("line {line_no}"),
                format!("expected {} values, found {}", m.n_genes, values.len()),
            ));
        }
        genes.push(GenomicProfile { sample_id: id, values });
    }
    if genes.len() != m.n_samples {
        return Err(Error::format(
            GENES,
            format!("line {}", genes.len() + 3),
            format!("expected {} samples, found {}", m.n_samples, genes.len()),
        ));
    }
    Ok((partition, genes))
}

fn load_patches(path: &Path, m: &Manifest) -> Result<Vec<PatchFeatureGrid>> {
    let bytes = read_file(path)?;
    if bytes.len() < 20 {
        return Err(Error::format(
            PATCHES,
            "byte 0",
            format!("expected at least 20 header bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != PATCH_MAGIC {
        return Err(Error::format(PATCHES, "byte 0", "bad magic, expected SFPG"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, c) = (field(0), field(1), field(2), field(3));
    if (n, h, w, c) != (m.n_samples, m.height, m.width, m.channels) {
        return Err(Error::format(
            PATCHES,
            "byte 4",
            format!(
                "header (n={n}, H={h}, W={w}, C={c}) does not match manifest (n={}, H={}, W={}, C={})",
                m.n_samples, m.height, m.width, m.channels
            ),
        ));
    }
    let cells = h * w * c;
    let record = ID_BYTES + 4 * cells;
    let expected = 20 + n * record;
    if bytes.len() != expected {
        return Err(Error::format(
            PATCHES,
            format!("byte {}", bytes.len().min(expected)),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let base = 20 + s * record;
        let id_raw = &bytes[base..base + ID_BYTES];
        let end = id_raw.iter().position(|&b| b == 0).unwrap_or(ID_BYTES);
        let sample_id = std::str::from_utf8(&id_raw[..end])
            .map_err(|_| Error::format(PATCHES, format!("byte {base}"), "sample id is not UTF-8"))?
            .to_string();
        let mut values = Vec::with_capacity(cells);
        for k in 0..cells {
            let off = base + ID_BYTES + 4 * k;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(PATCHES, format!("byte {off}"), "non-finite value"));
            }
            values.push(v as f64);
        }
        out.push(PatchFeatureGrid {
            sample_id,
            height: h,
            width: w,
            channels: c,
            values,
        });
    }
    Ok(out)
}

fn load_labels(path: &Path, m: &Manifest) -> Result<Vec<SampleLabel>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(LABELS, "0", "not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some("sample_id,diagnosis,grade,time,event,bin") {
        return Err(Error::format(LABELS, "line 1", "unexpected header"));
    }
    let mut labels = Vec::with_capacity(m.n_samples);
    for (k, line) in lines.enumerate() {
        let ln = k + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::format(LABELS, format!("line {ln}"), format!("expected 6 fields, found {}", f.len())));
        }
        let diagnosis = parse_usize(LABELS, ln, f[1])?;
        let grade = parse_usize(LABELS, ln, f[2])?;
        let time = parse_f64(LABELS, ln, f[3])?;
        let event = match f[4] {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(LABELS, format!("line {ln}"), format!("bad event flag {other:?}"))),
        };
        let bin = parse_usize(LABELS, ln, f[5])?;
        if diagnosis >= m.n_diagnosis || grade >= m.n_grade || time < 0.0 {
            return Err(Error::format(LABELS, format!("line {ln}"), "label out of range"));
        }
        if bin != m.survival_bin(time) {
            return Err(Error::format(
                LABELS,
                format!("line {ln}"),
                format!("bin {bin} inconsistent with quartiles (expected {})", m.survival_bin(time)),
            ));
        }
        labels.push(SampleLabel {
            sample_id: f[0].to_string(),
            diagnosis,
            grade,
            survival: SurvivalRecord { time, event, bin },
        });
    }
    if labels.len() != m.n_samples {
        return Err(Error::format(
            LABELS,
            format!("line {}", labels.len() + 2),
            format!("expected {} samples, found {}", m.n_samples, labels.len()),
        ));
    }
    Ok(labels)
}
