//! Training objectives. All arithmetic runs in f64; embeddings arrive as
//! `[N, P, D]` f32 arrays and gradients are returned in the same layout.

use ndarray::{Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How `tau` enters the softmax logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    /// `cos / tau`
    Divide,
    /// `cos * tau`
    Multiply,
}

impl TauMode {
    pub fn logit_scale(self, tau: f64) -> f64 {
        match self {
            TauMode::Divide => 1.0 / tau,
            TauMode::Multiply => tau,
        }
    }
}

impl std::str::FromStr for TauMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "divide" => Ok(Self::Divide),
            "multiply" => Ok(Self::Multiply),
            other => Err(format!("unknown tau mode `{other}` (expected divide|multiply)")),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of the softmax over scaled cosine similarities between
/// `q` and every key, with `keys[positive]` as the target.
pub fn info_nce(q: &[f64], keys: &[Vec<f64>], positive: usize, tau: f64, mode: TauMode) -> Result<f64> {
    Ok(info_nce_grad(q, keys, positive, tau, mode)?.0)
}

/// Loss and its gradient with respect to `q` (keys are constants).
pub fn info_nce_grad(q: &[f64], keys: &[Vec<f64>], positive: usize, tau: f64, mode: TauMode) -> Result<(f64, Vec<f64>)> {
    if keys.is_empty() {
        return Err(Error::EmptySet("info_nce keys"));
    }
    check_tau(tau)?;
    assert!(positive < keys.len(), "positive index out of range");
    unit(q)?;
    let k_hat: Vec<Vec<f64>> = keys.iter().map(|k| unit(k)).collect::<Result<_>>()?;
    Ok(nce_term(q, &k_hat, positive, mode.logit_scale(tau)))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::ParamOutOfRange {
            name: "tau",
            value: tau.to_string(),
            range: "> 0",
        });
    }
    Ok(())
}

/// Unit vector and norm; a zero vector stays zero.
fn unit_or_zero(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v);
    if n == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / n).collect(), n)
    }
}

/// InfoNCE against pre-normalized keys with logit scale `s`. A zero `q` (or
/// key) has cosine 0 with everything and receives no gradient.
fn nce_term(q: &[f64], k_hat: &[Vec<f64>], positive: usize, s: f64) -> (f64, Vec<f64>) {
    let (q_hat, q_norm) = unit_or_zero(q);
    let cos: Vec<f64> = k_hat.iter().map(|k| dot(&q_hat, k)).collect();
    let logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[positive];
    let mut grad = vec![0.0; q.len()];
    if q_norm == 0.0 {
        return (loss.max(0.0), grad);
    }
    for (j, (k, &c)) in k_hat.iter().zip(&cos).enumerate() {
        let coef = (logits[j] - lse).exp() - if j == positive { 1.0 } else { 0.0 };
        if coef == 0.0 {
            continue;
        }
        for ((g, &kv), &qv) in grad.iter_mut().zip(k).zip(&q_hat) {
            *g += coef * (kv - c * qv);
        }
    }
    grad.iter_mut().for_each(|g| *g *= s / q_norm);
    (loss.max(0.0), grad)
}

/// Value and gradients of a siamese objective. The key gradients are the
/// stop-gradient contract made explicit: they are always zero.
#[derive(Clone, Debug)]
pub struct SiameseLoss {
    pub loss: f64,
    pub grad_qa: Array3<f32>,
    pub grad_qb: Array3<f32>,
    pub grad_ka: Array3<f32>,
    pub grad_kb: Array3<f32>,
}

fn check_same_shape(arrays: &[&Array3<f32>]) -> Result<(usize, usize, usize)> {
    let d = arrays[0].dim();
    for a in arrays {
        if a.dim() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("{d:?}"),
                actual: format!("{:?}", a.dim()),
            });
        }
    }
    if d.0 == 0 {
        return Err(Error::EmptySet("siamese batch"));
    }
    Ok(d)
}

fn lane(a: &Array3<f32>, i: usize, p: usize) -> Vec<f64> {
    a.index_axis(Axis(0), i).index_axis(Axis(0), p).iter().map(|&v| v as f64).collect()
}

fn write_lane(a: &mut Array3<f32>, i: usize, p: usize, v: &[f64], scale: f64) {
    for (dst, &x) in a.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), p).iter_mut().zip(v) {
        *dst = (x * scale) as f32;
    }
}

/// `½ L(q_a[i], k_b) + ½ L(q_b[i], k_a)` with in-batch negatives, computed
/// per part and averaged over parts and pairs. Zero vectors are tolerated
/// here (cosine 0, no gradient) because a freshly initialized predictor can
/// emit them. `q_x` is the predictor output
/// for branch `x`, `k_x` the encoder output; only `q` receives gradient.
pub fn symmetrized_batch_loss(
    q_a: &Array3<f32>,
    q_b: &Array3<f32>,
    k_a: &Array3<f32>,
    k_b: &Array3<f32>,
    tau: f64,
    mode: TauMode,
) -> Result<SiameseLoss> {
    let (n, parts, _) = check_same_shape(&[q_a, q_b, k_a, k_b])?;
    check_tau(tau)?;
    let scale = mode.logit_scale(tau);
    let mut grad_qa = Array3::zeros(q_a.dim());
    let mut grad_qb = Array3::zeros(q_b.dim());
    let weight = 0.5 / (n * parts) as f64;
    let mut total = 0.0;
    for p in 0..parts {
        let keys_a: Vec<Vec<f64>> = (0..n).map(|j| unit_or_zero(&lane(k_a, j, p)).0).collect();
        let keys_b: Vec<Vec<f64>> = (0..n).map(|j| unit_or_zero(&lane(k_b, j, p)).0).collect();
        for i in 0..n {
            let (la, ga) = nce_term(&lane(q_a, i, p), &keys_b, i, scale);
            let (lb, gb) = nce_term(&lane(q_b, i, p), &keys_a, i, scale);
            total += weight * (la + lb);
            write_lane(&mut grad_qa, i, p, &ga, weight);
            write_lane(&mut grad_qb, i, p, &gb, weight);
        }
    }
    Ok(SiameseLoss {
        loss: total,
        grad_qa,
        grad_qb,
        grad_ka: Array3::zeros(k_a.dim()),
        grad_kb: Array3::zeros(k_b.dim()),
    })
}

/// Negative-free variant: `½ (1 − cos(q_a, k_b)) + ½ (1 − cos(q_b, k_a))`,
/// averaged over parts and pairs.
pub fn cosine_batch_loss(q_a: &Array3<f32>, q_b: &Array3<f32>, k_a: &Array3<f32>, k_b: &Array3<f32>) -> Result<SiameseLoss> {
    let (n, parts, _) = check_same_shape(&[q_a, q_b, k_a, k_b])?;
    let mut grad_qa = Array3::zeros(q_a.dim());
    let mut grad_qb = Array3::zeros(q_b.dim());
    let weight = 0.5 / (n * parts) as f64;
    let mut total = 0.0;
    let term = |q: &[f64], k: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (q_hat, q_norm) = unit_or_zero(q);
        let (k_hat, _) = unit_or_zero(k);
        let c = dot(&q_hat, &k_hat);
        if q_norm == 0.0 {
            return Ok((1.0, vec![0.0; q.len()]));
        }
        let g = q_hat.iter().zip(&k_hat).map(|(qv, kv)| -(kv - c * qv) / q_norm).collect();
        Ok((1.0 - c, g))
    };
    for i in 0..n {
        for p in 0..parts {
            let (la, ga) = term(&lane(q_a, i, p), &lane(k_b, i, p))?;
            let (lb, gb) = term(&lane(q_b, i, p), &lane(k_a, i, p))?;
            total += weight * (la + lb);
            write_lane(&mut grad_qa, i, p, &ga, weight);
            write_lane(&mut grad_qb, i, p, &gb, weight);
        }
    }
    Ok(SiameseLoss {
        loss: total,
        grad_qa,
        grad_qb,
        grad_ka: Array3::zeros(k_a.dim()),
        grad_kb: Array3::zeros(k_b.dim()),
    })
}

/// Mean over parts and dimensions of the across-batch standard deviation of
/// the L2-normalized embeddings. Collapsed representations drive it to 0;
/// isotropic unit vectors give about `1/sqrt(D)`.
pub fn embedding_std(emb: &Array3<f32>) -> f64 {
    let (n, parts, d) = emb.dim();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for p in 0..parts {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let v = lane(emb, i, p);
                let nv = norm(&v);
                if nv == 0.0 { v } else { v.iter().map(|x| x / nv).collect() }
            })
            .collect();
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            acc += var.sqrt();
        }
    }
    acc / (parts * d) as f64
}

fn euclid(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Batch-all triplet loss: every (anchor, positive, negative) triple per
/// part, hinge on Euclidean distances, averaged over the active (non-zero)
/// terms, then over parts. Returns the loss and its gradient.
pub fn triplet_loss<L: PartialEq>(emb: &Array3<f32>, labels: &[L], margin: f64) -> Result<(f64, Array3<f32>)> {
    let (n, parts, _) = emb.dim();
    assert_eq!(labels.len(), n, "one label per embedding");
    let has_pos = (0..n).any(|a| (0..n).any(|b| a != b && labels[a] == labels[b]));
    let has_neg = (0..n).any(|a| (0..n).any(|b| labels[a] != labels[b]));
    if !has_pos || !has_neg {
        return Err(Error::DegenerateBatch);
    }
    let mut grad = Array3::<f32>::zeros(emb.dim());
    let mut total = 0.0;
    for p in 0..parts {
        let x = emb.index_axis(Axis(1), p);
        let mut dist = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = euclid(x.row(i), x.row(j));
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        // Accumulated d loss / d dist[i][j] before averaging.
        let mut coef = vec![0.0f64; n * n];
        let (mut sum, mut active) = (0.0, 0usize);
        for a in 0..n {
            for pos in (0..n).filter(|&b| b != a && labels[b] == labels[a]) {
                for neg in (0..n).filter(|&b| labels[b] != labels[a]) {
                    let v = dist[a * n + pos] - dist[a * n + neg] + margin;
                    if v > 0.0 {
                        sum += v;
                        active += 1;
                        coef[a * n + pos] += 1.0;
                        coef[a * n + neg] -= 1.0;
                    }
                }
            }
        }
        if active == 0 {
            continue;
        }
        total += sum / active as f64;
        let scale = 1.0 / (active * parts) as f64;
        for i in 0..n {
            for j in 0..n {
                let c = coef[i * n + j];
                let d = dist[i * n + j];
                if c == 0.0 || d == 0.0 {
                    continue;
                }
                for k in 0..x.ncols() {
                    let g = c * scale * (x[[i, k]] as f64 - x[[j, k]] as f64) / d;
                    grad[[i, p, k]] += g as f32;
                    grad[[j, p, k]] -= g as f32;
                }
            }
        }
    }
    Ok((total / parts as f64, grad))
}
