//! Central finite-difference oracle and the per-op gradient suite.
//!
//! Each check draws random inputs, reduces the op output to a scalar with a
//! fixed random weighting `sum(out * R)`, and compares the tape gradient with
//! central differences computed purely from forward values.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use subspace_fusion::data::{GenePartition, SurvivalRecord};
use subspace_fusion::fusion::{
    cross_attention, deform_sample, fuse_teacher, generate_offsets, ge_con_loss, AttentionWeights, FusionConfig,
    OffsetHead,
};
use subspace_fusion::objectives::{ce_loss, nll_survival_loss, total_loss, LossWeights, Task};
use subspace_fusion::params::ParamStore;
use subspace_fusion::tensor::{Tape, Tensor, Var};
use subspace_fusion::train::{Model, ModelSpec};
use subspace_fusion::Result;

use super::{randn, uniform};

pub const STEP: f64 = 1e-6;
pub const CASES: usize = 100;
pub const TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `||a - n|| / max(||a||, ||n||)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(1e-6);
    norm(&diff) / scale
}

fn weighted_value(out: &Tensor, weights: &Tensor) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Gradient check of `f` with respect to every element of every input.
pub fn check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let forward = |xs: &[Tensor]| -> Tensor {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let value = (*out.value()).clone();
        value
    };
    let weights = randn(rng, forward(inputs).shape());

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let loss = out.mul(tape.constant(weights.clone())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).expect("backward");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*var).data());
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = weighted_value(&forward(&xs), &weights);
            xs[i].data_mut()[j] = orig - STEP;
            let down = weighted_value(&forward(&xs), &weights);
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub case: fn(&mut ChaCha8Rng) -> f64,
}

/// Worst relative error of `op` over [`CASES`] random cases.
pub fn worst_error(op: &OpCheck, rng: &mut ChaCha8Rng) -> f64 {
    (0..CASES).map(|_| (op.case)(rng)).fold(0.0, f64::max)
}

fn dim(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    rng.gen_range(1..=hi)
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let nd = rng.gen_range(1..=3);
    (0..nd).map(|_| dim(rng, 4)).collect()
}

/// Magnitudes in `[0.05, 2]` with random sign, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Normalized coordinates in `[-lo, lo]` at least `1e-4` away from every
/// cell centre of an `n`-cell axis, where the interpolant has a kink.
fn coordinate(rng: &mut ChaCha8Rng, n: usize, lo: f64) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-lo..lo);
        let px = ((x + 1.0) * n as f64 - 1.0) / 2.0;
        if (px - px.round()).abs() > 1e-4 {
            return x;
        }
    }
}

fn points(rng: &mut ChaCha8Rng, lead: &[usize], h: usize, w: usize) -> Tensor {
    let mut shape = lead.to_vec();
    shape.push(2);
    let mut k = 0;
    Tensor::from_fn(&shape, |_| {
        k += 1;
        if k % 2 == 1 {
            coordinate(rng, w, 1.2)
        } else {
            coordinate(rng, h, 1.2)
        }
    })
}

fn linear_pair(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> [Tensor; 2] {
    [randn(rng, &[fan_in, fan_out]).map(|v| v / (fan_in as f64).sqrt()), randn(rng, &[fan_out])]
}

fn survival_records(rng: &mut ChaCha8Rng, b: usize, bins: usize) -> Vec<SurvivalRecord> {
    (0..b)
        .map(|_| SurvivalRecord {
            time: rng.gen_range(0.1..10.0),
            event: rng.gen(),
            bin: rng.gen_range(0..bins),
        })
        .collect()
}

pub fn suite() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let (a, b) = (randn(r, &s), randn(r, &s));
                check(r, &[a, b], |_, v| v[0].add(v[1]))
            },
        },
        OpCheck {
            name: "sub",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let (a, b) = (randn(r, &s), randn(r, &s));
                check(r, &[a, b], |_, v| v[0].sub(v[1]))
            },
        },
        OpCheck {
            name: "mul",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let (a, b) = (randn(r, &s), randn(r, &s));
                check(r, &[a, b], |_, v| v[0].mul(v[1]))
            },
        },
        OpCheck {
            name: "scale/add_scalar",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s);
                check(r, &[x], |_, v| v[0].scale(-1.7)?.add_scalar(0.3))
            },
        },
        OpCheck {
            name: "relu",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = away_from_zero(r, &s);
                check(r, &[x], |_, v| v[0].relu())
            },
        },
        OpCheck {
            name: "selu",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = away_from_zero(r, &s);
                check(r, &[x], |_, v| v[0].selu())
            },
        },
        OpCheck {
            name: "sigmoid",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s).map(|v| 3.0 * v);
                check(r, &[x], |_, v| v[0].sigmoid())
            },
        },
        OpCheck {
            name: "tanh",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s);
                check(r, &[x], |_, v| v[0].tanh())
            },
        },
        OpCheck {
            name: "exp",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s);
                check(r, &[x], |_, v| v[0].exp())
            },
        },
        OpCheck {
            name: "log",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = uniform(r, &s, 0.2, 3.0);
                check(r, &[x], |_, v| v[0].log())
            },
        },
        OpCheck {
            name: "softplus",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s).map(|v| 4.0 * v);
                check(r, &[x], |_, v| v[0].softplus())
            },
        },
        OpCheck {
            name: "clamp",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                // Keep inputs clear of the kinks at the bounds.
                let x = away_from_zero(r, &s).map(|v| if (v.abs() - 0.5).abs() < 1e-3 { 1.1 * v } else { v });
                check(r, &[x], |_, v| v[0].clamp(-0.5, 0.5))
            },
        },
        OpCheck {
            name: "add_bias",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let b = randn(r, &[*s.last().unwrap()]);
                let x = randn(r, &s);
                check(r, &[x, b], |_, v| v[0].add_bias(v[1]))
            },
        },
        OpCheck {
            name: "matmul",
            tolerance: TOLERANCE,
            case: |r| {
                let (m, k, n) = (dim(r, 5), dim(r, 5), dim(r, 5));
                let (a, b) = (randn(r, &[m, k]), randn(r, &[k, n]));
                check(r, &[a, b], |_, v| v[0].matmul(v[1]))
            },
        },
        OpCheck {
            name: "bmm",
            tolerance: TOLERANCE,
            case: |r| {
                let (g, m, k, n) = (dim(r, 3), dim(r, 4), dim(r, 4), dim(r, 4));
                let (a, b) = (randn(r, &[g, m, k]), randn(r, &[g, k, n]));
                check(r, &[a, b], |_, v| v[0].bmm(v[1]))
            },
        },
        OpCheck {
            name: "reshape/permute/transpose",
            tolerance: TOLERANCE,
            case: |r| {
                let (a, b, c) = (dim(r, 3), dim(r, 3), dim(r, 3));
                let x = randn(r, &[a, b, c]);
                check(r, &[x], move |_, v| {
                    v[0].permute(&[2, 0, 1])?.reshape(&[c * a, b])?.transpose()?.reshape(&[b, a, c])
                })
            },
        },
        OpCheck {
            name: "softmax",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let axis = r.gen_range(0..s.len());
                let x = randn(r, &s).map(|v| 2.0 * v);
                check(r, &[x], move |_, v| v[0].softmax(axis))
            },
        },
        OpCheck {
            name: "log_softmax",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s).map(|v| 2.0 * v);
                check(r, &[x], |_, v| v[0].log_softmax())
            },
        },
        OpCheck {
            name: "sum/mean",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s);
                check(r, &[x], |_, v| v[0].sum()?.add(v[0].mean()?.scale(3.0)?))
            },
        },
        OpCheck {
            name: "mean_axis",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let axis = r.gen_range(0..s.len());
                let x = randn(r, &s);
                check(r, &[x], move |_, v| v[0].mean_axis(axis))
            },
        },
        OpCheck {
            name: "expand",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let axis = r.gen_range(0..=s.len());
                let count = dim(r, 3);
                let x = randn(r, &s);
                check(r, &[x], move |_, v| v[0].expand(axis, count))
            },
        },
        OpCheck {
            name: "concat",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let axis = r.gen_range(0..s.len());
                let mut s2 = s.clone();
                s2[axis] = dim(r, 3);
                let (a, b) = (randn(r, &s), randn(r, &s2));
                check(r, &[a, b], move |_, v| Var::concat(&[v[0], v[1]], axis))
            },
        },
        OpCheck {
            name: "frobenius_norm",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let x = randn(r, &s);
                check(r, &[x], |_, v| v[0].frobenius_norm())
            },
        },
        OpCheck {
            name: "normalize_rows",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, d) = (dim(r, 5), dim(r, 5));
                let x = away_from_zero(r, &[b, d]);
                check(r, &[x], |_, v| v[0].normalize_rows())
            },
        },
        OpCheck {
            name: "gram_matrix",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, d) = (dim(r, 5), dim(r, 5));
                let x = away_from_zero(r, &[b, d]);
                check(r, &[x], |_, v| v[0].gram_matrix())
            },
        },
        OpCheck {
            name: "linear",
            tolerance: TOLERANCE,
            case: |r| {
                let s = shape(r);
                let out = dim(r, 4);
                let [w, b] = linear_pair(r, *s.last().unwrap(), out);
                let x = randn(r, &s);
                check(r, &[x, w, b], |_, v| v[0].linear(v[1], Some(v[2])))
            },
        },
        OpCheck {
            name: "bilinear_sample",
            tolerance: TOLERANCE,
            case: |r| {
                let (h, w, c, p) = (dim(r, 4), dim(r, 4), dim(r, 3), dim(r, 6));
                let feat = randn(r, &[h, w, c]);
                let pts = points(r, &[p], h, w);
                check(r, &[feat, pts], |_, v| v[0].bilinear_sample(v[1]))
            },
        },
        OpCheck {
            name: "bilinear_sample (batched)",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c, p) = (dim(r, 3), dim(r, 4), dim(r, 4), dim(r, 3), dim(r, 5));
                let feat = randn(r, &[b, h, w, c]);
                let pts = points(r, &[b, p], h, w);
                check(r, &[feat, pts], |_, v| v[0].bilinear_sample(v[1]))
            },
        },
        OpCheck {
            name: "im2col3x3",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c) = (dim(r, 2), dim(r, 4), dim(r, 4), dim(r, 3));
                let x = randn(r, &[b, h, w, c]);
                check(r, &[x], |_, v| v[0].im2col3x3())
            },
        },
        OpCheck {
            name: "conv3x3",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c, co) = (dim(r, 2), dim(r, 4), dim(r, 4), dim(r, 3), dim(r, 3));
                let x = randn(r, &[b, h, w, c]);
                let [wt, bias] = linear_pair(r, 9 * c, co);
                check(r, &[x, wt, bias], |_, v| v[0].conv3x3(v[1], v[2]))
            },
        },
        OpCheck {
            name: "ce_loss",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, k) = (dim(r, 6), r.gen_range(2..=5));
                let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
                let x = randn(r, &[b, k]).map(|v| 2.0 * v);
                check(r, &[x], move |_, v| ce_loss(v[0], &labels))
            },
        },
        OpCheck {
            name: "nll_survival_loss",
            tolerance: TOLERANCE,
            case: |r| {
                let b = dim(r, 6);
                let recs = survival_records(r, b, 4);
                let x = randn(r, &[b, 4]).map(|v| 2.0 * v);
                check(r, &[x], move |_, v| nll_survival_loss(v[0], &recs))
            },
        },
        OpCheck {
            name: "ge_con_loss",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, d, h, w) = (r.gen_range(2..=5), dim(r, 5), dim(r, 3), dim(r, 3));
                let genes = away_from_zero(r, &[b, d]);
                let pts = uniform(r, &[b, h, w, 2], -1.0, 1.0);
                check(r, &[genes, pts], |_, v| ge_con_loss(v[0], v[1]))
            },
        },
        OpCheck {
            name: "total_loss",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, k, d) = (r.gen_range(2..=5), r.gen_range(2..=4), dim(r, 4));
                let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
                let alpha = r.gen_range(0.0..=1.0);
                let inputs = [
                    randn(r, &[b, k]),
                    away_from_zero(r, &[b, d]),
                    uniform(r, &[b, 2, 2, 2], -1.0, 1.0),
                    away_from_zero(r, &[b, d]),
                    uniform(r, &[b, 2, 2, 2], -1.0, 1.0),
                ];
                check(r, &inputs, move |_, v| {
                    total_loss(
                        ce_loss(v[0], &labels)?,
                        ge_con_loss(v[1], v[2])?,
                        ge_con_loss(v[3], v[4])?,
                        LossWeights::new(alpha)?,
                    )
                })
            },
        },
        OpCheck {
            name: "selu MLP (genomic encoder)",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, g, hdn, c) = (dim(r, 4), dim(r, 6), dim(r, 6), dim(r, 4));
                let [w1, b1] = linear_pair(r, g, hdn);
                let [w2, b2] = linear_pair(r, hdn, c);
                let x = randn(r, &[b, g]);
                check(r, &[x, w1, b1, w2, b2], |_, v| {
                    v[0].linear(v[1], Some(v[2]))?.selu()?.linear(v[3], Some(v[4]))?.selu()
                })
            },
        },
        OpCheck {
            name: "fuse_teacher",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c) = (dim(r, 3), dim(r, 3), dim(r, 3), dim(r, 4));
                let gene = randn(r, &[b, c]);
                let hist = randn(r, &[b, h, w, c]);
                let [wt, bias] = linear_pair(r, 2 * c, c);
                check(r, &[gene, hist, wt, bias], |_, v| fuse_teacher(v[0], v[1], v[2], v[3]))
            },
        },
        OpCheck {
            name: "generate_offsets",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c) = (dim(r, 2), dim(r, 3), dim(r, 3), dim(r, 3));
                let teacher = randn(r, &[b, h, w, c]);
                let [w1, b1] = linear_pair(r, 9 * c, c);
                let [w2, b2] = linear_pair(r, 9 * c, 2);
                check(r, &[teacher, w1, b1, w2, b2], |_, v| {
                    let head = OffsetHead {
                        conv1: (v[1], v[2]),
                        conv2: (v[3], v[4]),
                    };
                    generate_offsets(v[0], &head, 0.5)
                })
            },
        },
        OpCheck {
            name: "deform_sample",
            tolerance: TOLERANCE,
            case: |r| {
                let (b, h, w, c) = (dim(r, 2), dim(r, 4), dim(r, 4), dim(r, 3));
                let hist = randn(r, &[b, h, w, c]);
                let pts = points(r, &[b, h, w], h, w);
                check(r, &[hist, pts], |_, v| deform_sample(v[0], v[1]))
            },
        },
        OpCheck {
            name: "cross_attention",
            tolerance: TOLERANCE,
            case: |r| {
                let heads = dim(r, 3);
                let c = heads * dim(r, 2);
                let (b, n, nk) = (dim(r, 3), dim(r, 4), dim(r, 4));
                let mut inputs = vec![randn(r, &[b, n, c]), randn(r, &[b, nk, c])];
                for _ in 0..4 {
                    inputs.extend(linear_pair(r, c, c));
                }
                check(r, &inputs, move |_, v| {
                    let weights = AttentionWeights {
                        q: (v[2], v[3]),
                        k: (v[4], v[5]),
                        v: (v[6], v[7]),
                        o: (v[8], v[9]),
                    };
                    cross_attention(v[0], v[1], &weights, heads)
                })
            },
        },
    ]
}

/// End-to-end check: both streams, classifier, task loss and both
/// consistency terms, differentiated with respect to model parameters.
/// Central differences are taken on a random subset of `probes` coordinates
/// spread over every parameter tensor.
/// One-sided slopes differing by more than this mean the stencil straddles a
/// kink (relu, cell boundary, border clamp); smooth points differ by about
/// `STEP * |f''|`.
pub const KINK_ASYMMETRY: f64 = 1e-4;
/// Redraws allowed per accepted end-to-end case.
pub const MAX_REDRAWS: usize = 10;

#[derive(Clone, Copy, Debug)]
pub struct EndToEnd {
    pub error: f64,
    /// Cases redrawn because a probe's stencil crossed a non-differentiable point.
    pub redrawn: usize,
}

/// Draws full-model cases until one has no probe stencil across a kink, where
/// central differences do not estimate the derivative.
pub fn end_to_end_case(rng: &mut ChaCha8Rng, task: Task, probes_per_tensor: usize) -> EndToEnd {
    for redrawn in 0..=MAX_REDRAWS {
        let probes = end_to_end_probes(rng, task, probes_per_tensor);
        if probes.iter().any(|p| p.asymmetry > KINK_ASYMMETRY) {
            continue;
        }
        let (analytic, numeric): (Vec<f64>, Vec<f64>) = probes.iter().map(|p| (p.analytic, p.numeric)).unzip();
        return EndToEnd {
            error: relative_error(&analytic, &numeric),
            redrawn,
        };
    }
    panic!("{MAX_REDRAWS} consecutive end-to-end cases straddled a kink");
}

/// One probed parameter coordinate of the full model.
#[derive(Clone, Debug)]
pub struct Probe {
    pub key: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|forward slope - backward slope|` of the stencil.
    pub asymmetry: f64,
}

pub fn end_to_end_probes(rng: &mut ChaCha8Rng, task: Task, probes_per_tensor: usize) -> Vec<Probe> {
    let (b, h, w, c_in, g_t, g_e) = (rng.gen_range(2..=4), 3, 3, 3, 4, 5);
    let fusion = FusionConfig {
        heads: 2,
        embed_dim: 4,
        grid_h: h,
        grid_w: w,
        offset_scale: 0.5,
    };
    let spec = ModelSpec {
        task,
        fusion,
        n_tumour_genes: g_t,
        n_tme_genes: g_e,
        hist_channels: c_in,
        n_outputs: 4,
    };
    let model = Model::new(spec).unwrap();
    let mut params = model.init(rng.gen());
    // Non-zero offset head so the deformation path carries gradient.
    for key in ["t.offset.conv2.w", "e.offset.conv2.w", "t.offset.conv2.b", "e.offset.conv2.b"] {
        let shape = params.get(key).unwrap().shape().to_vec();
        params.insert(key, randn(rng, &shape).map(|v| 0.3 * v));
    }
    let partition = GenePartition::contiguous(g_t, g_t + g_e).unwrap();
    let genes = randn(rng, &[b, g_t + g_e]);
    let patches = randn(rng, &[b, h, w, c_in]);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..4)).collect();
    let records = survival_records(rng, b, 4);
    let alpha = rng.gen_range(0.0..=1.0);

    let loss_of = |store: &ParamStore, trainable: bool| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
        let tape = Tape::new();
        let bound = store.bind(&tape, trainable);
        let fwd = model.forward(&bound, &genes, &patches, &partition, true).unwrap();
        let task_loss = match task {
            Task::Survival => nll_survival_loss(fwd.logits, &records).unwrap(),
            _ => ce_loss(fwd.logits, &labels).unwrap(),
        };
        let loss = total_loss(
            task_loss,
            fwd.tumour.ge_con.unwrap(),
            fwd.tme.ge_con.unwrap(),
            LossWeights::new(alpha).unwrap(),
        )
        .unwrap();
        let grads = trainable.then(|| bound.gradients(&tape.backward(loss).unwrap()));
        (loss.item(), grads)
    };

    let (center, grads) = loss_of(&params, true);
    let grads = grads.unwrap();
    let keys: Vec<String> = params.keys().cloned().collect();
    let mut probes = Vec::new();
    for key in keys {
        let len = params.get(&key).unwrap().len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        for &j in idx.iter().take(probes_per_tensor) {
            let orig = params.get(&key).unwrap().data()[j];
            params.get_mut(&key).unwrap().data_mut()[j] = orig + STEP;
            let up = loss_of(&params, false).0;
            params.get_mut(&key).unwrap().data_mut()[j] = orig - STEP;
            let down = loss_of(&params, false).0;
            params.get_mut(&key).unwrap().data_mut()[j] = orig;
            probes.push(Probe {
                key: key.clone(),
                index: j,
                analytic: grads[&key].data()[j],
                numeric: (up - down) / (2.0 * STEP),
                asymmetry: ((up - center) - (center - down)).abs() / STEP,
            });
        }
    }
    probes
}
