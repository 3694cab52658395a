//! Numerical checks of the intra/inter-class distance argument on finite
//! embedding sets.
//!
//! Augmentation neighbourhoods are explicit finite sets: `pi` is the small
//! one-step neighbourhood and `Pi` a larger one. The checks here are
//! descriptive. They report whether the inequalities hold on concrete data
//! instead of assuming them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-9;

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest distance from `x` to `same_class` and smallest to `other_class`.
pub fn intra_inter(x: &[f64], same_class: &[Vec<f64>], other_class: &[Vec<f64>]) -> Result<(f64, f64)> {
    if same_class.is_empty() {
        return Err(Error::EmptySet("same_class"));
    }
    if other_class.is_empty() {
        return Err(Error::EmptySet("other_class"));
    }
    let d_plus = same_class.iter().map(|y| euclid(x, y)).fold(f64::NEG_INFINITY, f64::max);
    let d_minus = other_class.iter().map(|y| euclid(x, y)).fold(f64::INFINITY, f64::min);
    Ok((d_plus, d_minus))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetBound {
    /// Smallest distance from `x` to the universe outside the small set.
    pub d_minus_small: f64,
    /// Smallest distance from `x` to the universe outside the large set.
    pub d_minus_large: f64,
    pub holds: bool,
}

/// Compares the nearest outside-neighbourhood distance for nested sets
/// given as indices into `universe`. The complement of the smaller set is
/// larger, so its minimum can only be smaller. An empty complement has
/// distance `+inf`.
pub fn verify_subset_bound(x: &[f64], pi: &[usize], big_pi: &[usize], universe: &[Vec<f64>]) -> Result<SubsetBound> {
    if pi.iter().any(|i| !big_pi.contains(i)) {
        return Err(Error::SubsetViolation);
    }
    if big_pi.iter().any(|&i| i >= universe.len()) {
        return Err(Error::SubsetViolation);
    }
    let outside_min = |set: &[usize]| {
        universe
            .iter()
            .enumerate()
            .filter(|(i, _)| !set.contains(i))
            .map(|(_, y)| euclid(x, y))
            .fold(f64::INFINITY, f64::min)
    };
    let d_minus_small = outside_min(pi);
    let d_minus_large = outside_min(big_pi);
    Ok(SubsetBound {
        d_minus_small,
        d_minus_large,
        holds: d_minus_small <= d_minus_large,
    })
}

/// `x_0 .. x_N`, each step moving to the farthest member of the previous
/// point's neighbourhood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationChain {
    pub points: Vec<Vec<f64>>,
}

impl AugmentationChain {
    pub fn len(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_distances(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| euclid(&w[0], &w[1])).collect()
    }
}

/// Builds an `n`-step chain from `x`; ties pick the first member.
pub fn build_chain<F>(x: &[f64], mut pi_sampler: F, n: usize) -> Result<AugmentationChain>
where
    F: FnMut(&[f64]) -> Vec<Vec<f64>>,
{
    let mut points = vec![x.to_vec()];
    for step in 1..=n {
        let prev = points.last().expect("non-empty");
        let cands = pi_sampler(prev);
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cands.iter().enumerate() {
            let d = euclid(prev, c);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.ok_or(Error::EmptyAugSet(step))?;
        points.push(cands[i].clone());
    }
    Ok(AugmentationChain { points })
}

/// Default neighbourhood: members of `set` within `radius` of the query.
pub fn radius_sampler(set: &[Vec<f64>], radius: f64) -> impl FnMut(&[f64]) -> Vec<Vec<f64>> + '_ {
    move |x| set.iter().filter(|y| euclid(x, y) <= radius).cloned().collect()
}

/// End-to-end distance, the sum of step distances, and whether the former
/// is bounded by the latter up to [`TOLERANCE`].
pub fn verify_transitivity(chain: &AugmentationChain) -> (f64, f64, bool) {
    let (first, last) = match (chain.points.first(), chain.points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return (0.0, 0.0, true),
    };
    let lhs = euclid(first, last);
    let rhs: f64 = chain.step_distances().iter().sum();
    (lhs, rhs, lhs <= rhs + TOLERANCE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBounds {
    /// Largest intra-class distance over the set.
    pub d_plus: f64,
    /// Smallest inter-class distance over the set.
    pub d_minus: f64,
    /// Largest one-step distance inside any radius neighbourhood.
    pub a: f64,
    /// Smallest inter-class distance (the same quantity as `d_minus`).
    pub b: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub bounds: DistanceBounds,
    /// `N * a < b`: the sufficient condition for separability.
    pub sufficient: bool,
    /// `d_plus < d_minus` observed on the data.
    pub separated: bool,
    /// Fraction of points whose neighbourhood step stays below `b`.
    pub assumption_rate: f64,
    pub points: usize,
    pub classes: usize,
}

/// Estimates `a` (within-neighbourhood step size, neighbourhoods restricted
/// to the point's own class) and `b` (smallest inter-class gap) and checks
/// `N * a < b`.
pub fn bounds_report<L: PartialEq>(set: &[Vec<f64>], labels: &[L], pi_radius: f64, n: usize) -> Result<BoundsReport> {
    if set.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", set.len()),
            actual: format!("{}", labels.len()),
        });
    }
    if !(pi_radius >= 0.0) {
        return Err(Error::ParamOutOfRange {
            name: "pi_radius",
            value: pi_radius.to_string(),
            range: ">= 0",
        });
    }
    if n == 0 {
        return Err(Error::ParamOutOfRange {
            name: "chain_len",
            value: "0".into(),
            range: ">= 1",
        });
    }
    let mut classes: Vec<&L> = Vec::new();
    for l in labels {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    if classes.len() < 2 {
        return Err(Error::EmptySet("other_class"));
    }
    let (mut d_plus, mut d_minus, mut a) = (0.0f64, f64::INFINITY, 0.0f64);
    let mut steps = vec![0.0f64; set.len()];
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let d = euclid(&set[i], &set[j]);
            if labels[i] == labels[j] {
                d_plus = d_plus.max(d);
                if d <= pi_radius {
                    a = a.max(d);
                    steps[i] = steps[i].max(d);
                    steps[j] = steps[j].max(d);
                }
            } else {
                d_minus = d_minus.min(d);
            }
        }
    }
    let b = d_minus;
    let assumption_rate = steps.iter().filter(|&&s| s <= b).count() as f64 / set.len() as f64;
    Ok(BoundsReport {
        bounds: DistanceBounds { d_plus, d_minus, a, b, n },
        sufficient: (n as f64) * a < b,
        separated: d_plus < d_minus,
        assumption_rate,
        points: set.len(),
        classes: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn intra_inter_hand_values() {
        assert_eq!(intra_inter(&[0.0], &pts(&[1.0, 2.0]), &pts(&[5.0])).unwrap(), (2.0, 5.0));
        assert_eq!(intra_inter(&[3.0], &pts(&[3.0]), &pts(&[5.0])).unwrap().0, 0.0);
        assert!(matches!(intra_inter(&[0.0], &[], &pts(&[1.0])), Err(Error::EmptySet(_))));
    }

    #[test]
    fn subset_bound_hand_instance() {
        let universe = pts(&[1.0, 9.0, 10.0]);
        let r = verify_subset_bound(&[0.0], &[0], &[0, 1], &universe).unwrap();
        assert_eq!((r.d_minus_small, r.d_minus_large, r.holds), (9.0, 10.0, true));
        let same = verify_subset_bound(&[0.0], &[0, 1], &[0, 1], &universe).unwrap();
        assert_eq!(same.d_minus_small, same.d_minus_large);
        assert!(matches!(verify_subset_bound(&[0.0], &[2], &[0, 1], &universe), Err(Error::SubsetViolation)));
    }

    #[test]
    fn chains() {
        let step = |x: &[f64]| vec![vec![x[0] + 1.0], vec![x[0] + 0.5]];
        let c = build_chain(&[0.0], step, 4).unwrap();
        assert_eq!(c.points, pts(&[0.0, 1.0, 2.0, 3.0, 4.0]));
        let (lhs, rhs, ok) = verify_transitivity(&c);
        assert!(ok && (lhs - rhs).abs() < 1e-12);
        let fixed = build_chain(&[2.0, 1.0], |x: &[f64]| vec![x.to_vec()], 3).unwrap();
        assert!(fixed.points.iter().all(|p| p == &vec![2.0, 1.0]));
        assert!(matches!(build_chain(&[0.0], |_: &[f64]| Vec::new(), 2), Err(Error::EmptyAugSet(1))));
        // Equal distances: the first member wins.
        let tie = build_chain(&[0.0], |x: &[f64]| vec![vec![x[0] - 1.0], vec![x[0] + 1.0]], 1).unwrap();
        assert_eq!(tie.points[1], vec![-1.0]);
        let set = pts(&[0.0, 0.4, 0.8, 5.0]);
        let r = build_chain(&[0.0], radius_sampler(&set, 0.5), 2).unwrap();
        // From 0.4 both 0.0 and 0.8 are 0.4 away; the earlier member wins.
        assert_eq!(r.points, pts(&[0.0, 0.4, 0.0]));
    }

    #[test]
    fn bounds_verdicts() {
        let mut set = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [0.0, 10.0].into_iter().enumerate() {
            for k in 0..5 {
                set.push(vec![centre + 0.025 * k as f64]);
                labels.push(c);
            }
        }
        let r = bounds_report(&set, &labels, 0.1, 3).unwrap();
        assert!(r.sufficient && r.separated);
        assert!(r.bounds.a <= 0.1 + 1e-12 && (r.bounds.b - 9.9).abs() < 1e-9);
        let overlap: Vec<Vec<f64>> = pts(&[0.0, 1.0, 2.0, 0.5, 1.5, 2.5]);
        let r = bounds_report(&overlap, &[0, 0, 0, 1, 1, 1], 1.0, 3).unwrap();
        assert!(!r.sufficient && !r.separated);
        let degenerate = bounds_report(&pts(&[0.0, 0.0, 4.0]), &[0, 0, 1], 1.0, 1000).unwrap();
        assert_eq!(degenerate.bounds.a, 0.0);
        assert!(degenerate.sufficient);
        assert!(bounds_report(&pts(&[0.0, 1.0]), &[0, 0], 1.0, 1).is_err());
    }
}
