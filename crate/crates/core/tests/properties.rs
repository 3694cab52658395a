use std::collections::HashSet;

use gaitlab_core::augment::{apply_sao_spatial, SpatialAugConfig};
use gaitlab_core::dataset::{read_container, write_container};
use gaitlab_core::eval::{pairwise_distance, rank1, EmbeddingRecord, MatchRules};
use gaitlab_core::loss::{symmetrized_batch_loss, triplet_loss, TauMode};
use gaitlab_core::probe::{build_chain, euclid, verify_subset_bound, verify_transitivity, TOLERANCE};
use gaitlab_core::silhouette::{sample_disjoint_clip_pair, size_normalize, Clip, GaitSequence, SilhouetteFrame};
use gaitlab_core::view::{sequence_view_stats, view_class};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn frame(h: usize, w: usize, bits: &[bool]) -> SilhouetteFrame {
    SilhouetteFrame::from_fn(h, w, |r, c| bits[(r * w + c) % bits.len()])
}

/// A clip of `len` 64x44 frames, each a jittered upright ellipse.
fn body_clip(seed: u64, len: usize) -> Clip {
    let mut g = rng(seed);
    let frames = (0..len)
        .map(|_| {
            let (cy, cx) = (g.random_range(25.0..39.0), g.random_range(16.0..28.0));
            let (ry, rx) = (g.random_range(12.0..30.0), g.random_range(4.0..10.0));
            SilhouetteFrame::from_fn(64, 44, |r, c| {
                let (y, x) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                y * y + x * x <= 1.0
            })
        })
        .collect();
    Clip::from_sequence(&GaitSequence::new("clip", frames).unwrap())
}

fn unit_or_raw(g: &mut ChaCha8Rng, n: usize, parts: usize, d: usize) -> Array3<f32> {
    Array3::from_shape_fn((n, parts, d), |_| g.random_range(-1.0f32..1.0))
}

fn record(i: usize, subject: usize, view: &str, emb: Array2<f32>) -> EmbeddingRecord {
    EmbeddingRecord {
        sequence_id: format!("s{i}"),
        subject_id: Some(format!("{subject:03}")),
        view: Some(view.to_string()),
        condition: Some("nm".into()),
        embedding: emb,
    }
}

fn random_records(g: &mut ChaCha8Rng, n: usize, subjects: usize, views: &[&str]) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|i| {
            let emb = Array2::from_shape_fn((2, 3), |_| g.random_range(-1.0f32..1.0));
            record(i, g.random_range(0..subjects), views[g.random_range(0..views.len())], emb)
        })
        .collect()
}

/// Exhaustive batch-all triplet oracle: mean of positive hinge values per
/// part, averaged over parts.
fn triplet_oracle(emb: &Array3<f32>, labels: &[u8], margin: f64) -> f64 {
    let (n, parts, _) = emb.dim();
    let dist = |p: usize, i: usize, j: usize| {
        let a: Vec<f64> = emb.slice(ndarray::s![i, p, ..]).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = emb.slice(ndarray::s![j, p, ..]).iter().map(|&v| v as f64).collect();
        euclid(&a, &b)
    };
    let mut total = 0.0;
    for p in 0..parts {
        let mut terms = Vec::new();
        for a in 0..n {
            for pos in 0..n {
                for neg in 0..n {
                    if pos != a && labels[pos] == labels[a] && labels[neg] != labels[a] {
                        let v = dist(p, a, pos) - dist(p, a, neg) + margin;
                        if v > 0.0 {
                            terms.push(v);
                        }
                    }
                }
            }
        }
        if !terms.is_empty() {
            total += terms.iter().sum::<f64>() / terms.len() as f64;
        }
    }
    total / parts as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn size_normalize_is_idempotent(seed in any::<u64>(), h in 20usize..120, w in 20usize..90) {
        let mut g = rng(seed);
        let (cy, cx) = (g.random_range(0.3..0.7) * h as f64, g.random_range(0.3..0.7) * w as f64);
        let ry = g.random_range(0.2..0.45) * h as f64;
        // Narrow enough that the scaled body fits the 44-column canvas.
        let rx = (g.random_range(0.1..0.6) * ry).min(0.45 * w as f64);
        let raw = SilhouetteFrame::from_fn(h, w, |r, c| {
            let (y, x) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
            y * y + x * x <= 1.0 && g.random_bool(0.95)
        });
        let once = match size_normalize(&raw, 64, 44) {
            Ok(f) => f,
            Err(_) => return Err(TestCaseError::reject("degenerate body")),
        };
        prop_assert!(once.pixels().iter().all(|&p| p <= 1));
        prop_assert_eq!(size_normalize(&once, 64, 44).unwrap(), once);
    }

    #[test]
    fn disjoint_pairs_never_share_frames(seed in any::<u64>(), len in 1usize..20, extra in 0usize..30) {
        let n = 2 * len + extra;
        let frames = (0..n).map(|_| SilhouetteFrame::zeros(4, 3)).collect();
        let seq = GaitSequence::new("s", frames).unwrap();
        let (a, b) = sample_disjoint_clip_pair(&seq, len, &mut rng(seed));
        prop_assert_eq!(a.len(), len);
        prop_assert_eq!(b.len(), len);
        let sa: HashSet<usize> = a.frame_indices.iter().copied().collect();
        prop_assert!(b.frame_indices.iter().all(|i| !sa.contains(i) && *i < n));
    }

    #[test]
    fn container_round_trip_is_exact(
        bits in proptest::collection::vec(any::<bool>(), 1..400),
        h in 1usize..20,
        w in 1usize..20,
        counts in proptest::collection::vec(1usize..5, 1..4),
    ) {
        let seqs: Vec<GaitSequence> = counts
            .iter()
            .enumerate()
            .map(|(s, &k)| {
                let frames = (0..k).map(|f| frame(h, w, &bits[(s + f) % bits.len()..])).collect();
                GaitSequence::new(format!("seq{s}"), frames)
                    .unwrap()
                    .with_labels(Some(format!("{s:03}")), Some("090".into()), Some("nm-01".into()))
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gssb");
        write_container(&path, &seqs).unwrap();
        prop_assert_eq!(read_container(&path).unwrap(), seqs);
    }

    #[test]
    fn augmentation_keeps_binary_shape_and_replays(
        seed in any::<u64>(),
        probs in proptest::array::uniform4(0.0f64..=1.0),
        len in 1usize..6,
    ) {
        let clip = body_clip(seed, len);
        let cfg = SpatialAugConfig {
            p_flip: probs[0],
            p_affine: probs[1],
            p_perspective: probs[2],
            p_dilation: probs[3],
            ..SpatialAugConfig::default()
        };
        let (out, record) = apply_sao_spatial(&clip, &cfg, &mut rng(seed ^ 1));
        prop_assert_eq!(out.len(), clip.len());
        for f in &out.frames {
            prop_assert_eq!((f.height(), f.width()), (64, 44));
            prop_assert!(f.pixels().iter().all(|&p| p <= 1));
        }
        let (again, record2) = apply_sao_spatial(&clip, &cfg, &mut rng(seed ^ 1));
        prop_assert_eq!(&again, &out);
        prop_assert_eq!(&record2, &record);
        prop_assert_eq!(record.replay(&clip), out);
    }

    #[test]
    fn dilation_only_grows_the_foreground(seed in any::<u64>(), len in 1usize..6) {
        let clip = body_clip(seed, len);
        let cfg = SpatialAugConfig { p_dilation: 1.0, ..SpatialAugConfig::disabled() };
        let (out, record) = apply_sao_spatial(&clip, &cfg, &mut rng(seed));
        prop_assert!(record.dilation.is_some());
        for (o, i) in out.frames.iter().zip(&clip.frames) {
            prop_assert!(o.contains(i));
        }
    }

    #[test]
    fn view_variance_matches_integer_formula(views in proptest::collection::vec(0usize..7, 1..200)) {
        let st = sequence_view_stats(&views).unwrap();
        let m = views.len() as i64;
        let s: i64 = views.iter().map(|&v| v as i64).sum();
        let s2: i64 = views.iter().map(|&v| (v * v) as i64).sum();
        prop_assert_eq!(st.m, views.len());
        prop_assert!((st.v_bar - s as f64 / m as f64).abs() < 1e-12);
        let expected = if m < 2 { 0.0 } else { (m * s2 - s * s) as f64 / (m * (m - 1)) as f64 };
        prop_assert!((st.sigma_sq - expected).abs() < 1e-9 * (1.0 + expected));
    }

    #[test]
    fn contrastive_loss_is_scale_invariant_and_swap_symmetric(
        seed in any::<u64>(),
        n in 2usize..6,
        parts in 1usize..4,
        lambda in 0.05f32..20.0,
        multiply in any::<bool>(),
    ) {
        let mut g = rng(seed);
        let d = 5;
        let (qa, qb, ka, kb) = (unit_or_raw(&mut g, n, parts, d), unit_or_raw(&mut g, n, parts, d), unit_or_raw(&mut g, n, parts, d), unit_or_raw(&mut g, n, parts, d));
        let (tau, mode) = if multiply { (16.0, TauMode::Multiply) } else { (0.5, TauMode::Divide) };
        let base = symmetrized_batch_loss(&qa, &qb, &ka, &kb, tau, mode).unwrap().loss;
        prop_assert!(base > 0.0);
        let swapped = symmetrized_batch_loss(&qb, &qa, &kb, &ka, tau, mode).unwrap().loss;
        prop_assert!((base - swapped).abs() < 1e-9 * base.max(1.0));
        let (i, p) = (g.random_range(0..n), g.random_range(0..parts));
        let mut scaled = ka.clone();
        scaled.slice_mut(ndarray::s![i, p, ..]).mapv_inplace(|v| v * lambda);
        let mut qs = qa.clone();
        qs.slice_mut(ndarray::s![i, p, ..]).mapv_inplace(|v| v * lambda);
        let moved = symmetrized_batch_loss(&qs, &qb, &scaled, &kb, tau, mode).unwrap().loss;
        prop_assert!((base - moved).abs() < 1e-5 * base.max(1.0), "{} vs {}", base, moved);
    }

    #[test]
    fn triplet_matches_oracle_and_ignores_rotation(
        seed in any::<u64>(),
        n in 3usize..9,
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let mut g = rng(seed);
        let (parts, d) = (2, 4);
        let emb = unit_or_raw(&mut g, n, parts, d);
        let mut labels: Vec<u8> = (0..n).map(|_| g.random_range(0..3)).collect();
        labels[0] = labels[1];
        labels[2] = labels[0] + 1;
        let (loss, _) = triplet_loss(&emb, &labels, 0.2).unwrap();
        prop_assert!((loss - triplet_oracle(&emb, &labels, 0.2)).abs() < 1e-9);

        // The same rotation in the (0, 2) plane of every vector.
        let (c, s) = (angle.cos() as f32, angle.sin() as f32);
        let mut rot = emb.clone();
        for mut lane in rot.lanes_mut(ndarray::Axis(2)) {
            let (x, z) = (lane[0], lane[2]);
            lane[0] = c * x - s * z;
            lane[2] = s * x + c * z;
        }
        let (rotated, _) = triplet_loss(&rot, &labels, 0.2).unwrap();
        prop_assert!((loss - rotated).abs() < 1e-5, "{} vs {}", loss, rotated);
    }

    #[test]
    fn distance_is_a_metric(seed in any::<u64>(), parts in 1usize..5, d in 1usize..8) {
        let mut g = rng(seed);
        let mut e = || Array2::from_shape_fn((parts, d), |_| g.random_range(-2.0f32..2.0));
        let (a, b, c) = (e(), e(), e());
        let ab = pairwise_distance(a.view(), b.view()).unwrap();
        let bc = pairwise_distance(b.view(), c.view()).unwrap();
        let ac = pairwise_distance(a.view(), c.view()).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert_eq!(ab, pairwise_distance(b.view(), a.view()).unwrap());
        prop_assert_eq!(pairwise_distance(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn far_gallery_items_change_nothing(seed in any::<u64>(), n in 2usize..40, skip in any::<bool>()) {
        let mut g = rng(seed);
        let gallery = random_records(&mut g, n, 4, &["000"]);
        let probe = random_records(&mut g, n, 4, &["000"]);
        let (probe_refs, gallery_refs): (Vec<_>, Vec<_>) = (probe.iter().collect(), gallery.iter().collect());
        let rules = MatchRules { cross_view: false, skip_empty: skip };
        let before = rank1(&probe_refs, &gallery_refs, rules);
        // A new subject, so no probe changes between skipped and evaluated.
        let far = record(10_000, 99, "000", Array2::from_elem((2, 3), 50.0));
        let mut grown = gallery_refs.clone();
        grown.push(&far);
        let after = rank1(&probe_refs, &grown, rules);
        match (before, after) {
            (Ok(b), Ok(a)) if skip => prop_assert_eq!(b.0, a.0),
            (Ok(b), Ok(a)) => prop_assert_eq!((b.0, b.2), (a.0, a.2)),
            // Without skipping, a probe with no own-subject candidate still
            // has a nearest neighbour, so both calls succeed or both fail.
            (Err(_), Err(_)) => {}
            (b, a) => prop_assert!(false, "{:?} vs {:?}", b.map(|r| r.0), a.map(|r| r.0)),
        }
    }

    #[test]
    fn cross_view_scalar_is_the_cell_mean(seed in any::<u64>(), n in 4usize..60) {
        let mut g = rng(seed);
        let views = ["000", "045", "090"];
        let gallery = random_records(&mut g, n, 3, &views);
        let probe = random_records(&mut g, n, 3, &views);
        let (p, gl): (Vec<_>, Vec<_>) = (probe.iter().collect(), gallery.iter().collect());
        let (scalar, matrix, _, _) = rank1(&p, &gl, MatchRules { cross_view: true, skip_empty: true }).unwrap();
        let m = matrix.unwrap();
        let mut cells = Vec::new();
        for (pi, row) in m.cells.iter().enumerate() {
            for (gi, cell) in row.iter().enumerate() {
                if m.probe_views[pi] == m.gallery_views[gi] {
                    prop_assert!(cell.is_none());
                } else if let Some(v) = cell {
                    cells.push(*v);
                }
            }
        }
        let mean = if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 };
        prop_assert_eq!(scalar, mean);
    }

    #[test]
    fn nested_sets_obey_the_subset_bound(seed in any::<u64>(), size in 2usize..30, d in 1usize..6) {
        let mut g = rng(seed);
        let universe: Vec<Vec<f64>> = (0..size).map(|_| (0..d).map(|_| g.random_range(-3.0..3.0)).collect()).collect();
        let x: Vec<f64> = (0..d).map(|_| g.random_range(-3.0..3.0)).collect();
        let big: Vec<usize> = (0..size).filter(|_| g.random_bool(0.6)).collect();
        let small: Vec<usize> = big.iter().copied().filter(|_| g.random_bool(0.5)).collect();
        let r = verify_subset_bound(&x, &small, &big, &universe).unwrap();
        prop_assert!(r.holds);
        prop_assert!(r.d_minus_small <= r.d_minus_large);
    }

    #[test]
    fn chains_obey_the_triangle_inequality(seed in any::<u64>(), steps in 1usize..12, d in 1usize..6) {
        let mut g = rng(seed);
        let mut sampler = |x: &[f64]| -> Vec<Vec<f64>> {
            (0..3).map(|_| x.iter().map(|v| v + g.random_range(-1.0..1.0)).collect()).collect()
        };
        let x: Vec<f64> = (0..d).map(|_| 0.0).collect();
        let chain = build_chain(&x, &mut sampler, steps).unwrap();
        prop_assert_eq!(chain.len(), steps);
        let (lhs, rhs, holds) = verify_transitivity(&chain);
        prop_assert!(holds);
        prop_assert!(lhs <= rhs + TOLERANCE);
    }
}

#[test]
fn merged_view_classes_fold_opposite_angles() {
    for k in 0..7 {
        let theta = 15.0 * k as f64;
        assert_eq!(view_class(theta).unwrap(), k);
        assert_eq!(view_class(theta + 180.0).unwrap(), k);
    }
    assert!(view_class(105.0).is_err());
    assert!(view_class(7.5).is_err());
}
