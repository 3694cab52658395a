use gaitlab_core::synthetic::{build_corpus, Condition, CorpusSpec};
use gaitlab_core::view::{build_view_input, classify_sequence, train_view_classifier, view_class, view_clips, ViewTrainConfig};

#[test]
fn classifier_fits_a_synthetic_view_corpus() {
    let views: Vec<f64> = (0..7).map(|k| 15.0 * k as f64).collect();
    let spec = CorpusSpec::new(8, views, &[Condition::Nm], 2, 32, 5);
    let (_, seqs) = build_corpus(&spec).unwrap();
    let mut examples = Vec::new();
    for s in &seqs {
        let class = view_class(s.view_degrees().unwrap()).unwrap();
        for clip in view_clips(s, 16) {
            examples.push((build_view_input(&clip).unwrap(), class));
        }
    }
    let cfg = ViewTrainConfig { epochs: 15, ..ViewTrainConfig::default() };
    let (mut model, acc) = train_view_classifier(&examples, &cfg).unwrap();
    assert!(acc > 0.95, "training accuracy {acc}");
    let stats = classify_sequence(&mut model, &seqs[0], 16).unwrap();
    assert_eq!(stats.m, 2);
}
