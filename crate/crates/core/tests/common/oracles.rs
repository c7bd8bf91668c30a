//! Independent reference implementations: plain loops over `f64`, no tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use subspace_fusion::data::SurvivalRecord;

/// Harrell's C by enumerating every ordered pair.
pub fn brute_c_index(risks: &[f64], records: &[SurvivalRecord]) -> f64 {
    let mut concordant = 0.0;
    let mut comparable = 0.0;
    for i in 0..records.len() {
        for j in 0..records.len() {
            if records[i].event && records[i].time < records[j].time {
                comparable += 1.0;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0.0 {
        0.5
    } else {
        concordant / comparable
    }
}

/// Mean negative log-likelihood from explicit event/survival probabilities.
pub fn product_form_nll(logits: &[Vec<f64>], records: &[SurvivalRecord]) -> f64 {
    let mut total = 0.0;
    for (row, r) in logits.iter().zip(records) {
        let h: Vec<f64> = row.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let survive_to = |j: usize| h[..j].iter().map(|v| 1.0 - v).product::<f64>();
        let likelihood = if r.event {
            survive_to(r.bin) * h[r.bin]
        } else {
            survive_to(r.bin + 1)
        };
        total -= likelihood.ln();
    }
    total / records.len() as f64
}

/// Random censored cohort with deliberately tied times and risks.
pub fn random_survival(rng: &mut ChaCha8Rng, b: usize) -> (Vec<f64>, Vec<SurvivalRecord>) {
    let risks = (0..b).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect();
    let records = (0..b)
        .map(|_| SurvivalRecord {
            time: rng.gen_range(1..12) as f64,
            event: rng.gen_bool(0.6),
            bin: rng.gen_range(0..4),
        })
        .collect();
    (risks, records)
}

pub struct Linear {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|o| self.b[o] + x.iter().enumerate().map(|(i, xi)| xi * self.w[i][o]).sum::<f64>())
            .collect()
    }
}

/// Multi-head attention one query, one head at a time, followed by the output
/// projection and a mean over query tokens. `teacher[b][n]`, `keys[b][m]`.
pub fn naive_attention(
    teacher: &[Vec<Vec<f64>>],
    deformed: &[Vec<Vec<f64>>],
    q: &Linear,
    k: &Linear,
    v: &Linear,
    o: &Linear,
    heads: usize,
) -> Vec<Vec<f64>> {
    let c = q.b.len();
    let d = c / heads;
    teacher
        .iter()
        .zip(deformed)
        .map(|(tokens, keys)| {
            let kk: Vec<Vec<f64>> = keys.iter().map(|x| k.apply(x)).collect();
            let vv: Vec<Vec<f64>> = keys.iter().map(|x| v.apply(x)).collect();
            let mut pooled = vec![0.0; c];
            for token in tokens {
                let qq = q.apply(token);
                let mut concat = vec![0.0; c];
                for h in 0..heads {
                    let lo = h * d;
                    let scores: Vec<f64> = kk
                        .iter()
                        .map(|key| (lo..lo + d).map(|i| qq[i] * key[i]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (e, value) in exps.iter().zip(&vv) {
                        for i in lo..lo + d {
                            concat[i] += e / z * value[i];
                        }
                    }
                }
                for (p, y) in pooled.iter_mut().zip(o.apply(&concat)) {
                    *p += y / tokens.len() as f64;
                }
            }
            pooled
        })
        .collect()
}
