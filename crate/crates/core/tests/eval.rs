//! Evaluation modes against direct compositions of forward and metrics.

use contextnet_core::arch::{build_contextnet, ContextNetConfig};
use contextnet_core::data::{compute_miou, generate_synthetic_dataset, stack_batch, ConfusionMatrix, SegSample};
use contextnet_core::eval::*;
use contextnet_core::graph::ForwardOptions;
use contextnet_core::kernels::softmax;
use contextnet_core::{seeded_rng, Mark};

fn setup() -> (contextnet_core::Graph, Vec<SegSample>) {
    let g = build_contextnet(&ContextNetConfig::cn14(4, 32, 64), 3).unwrap();
    (g, generate_synthetic_dataset(6, 32, 64, 4, 1).unwrap())
}

#[test]
fn normal_mode_is_forward_then_miou() {
    let (g, data) = setup();
    let (_, report) = evaluate(Predictor::Model(&g, EvalMode::Normal), &data, 4, 4).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    for s in &data {
        let y = g.run(&s.image, &ForwardOptions::inference(), g.mark(Mark::FullLogits).unwrap(), &mut seeded_rng(0)).unwrap();
        cm.update(&argmax(&y), s.labels.data()).unwrap();
    }
    assert_eq!(report, compute_miou(&cm));
}

#[test]
fn zeroing_both_branches_predicts_one_class() {
    let (g, data) = setup();
    let refs: Vec<&SegSample> = data.iter().collect();
    let (x, labels) = stack_batch(&refs).unwrap();
    let mut opts = ForwardOptions::inference();
    opts.zeroed = vec![g.mark(Mark::ContextOut).unwrap(), g.mark(Mark::DetailOut).unwrap()];
    let y = g.run(&x, &opts, g.mark(Mark::FullLogits).unwrap(), &mut seeded_rng(0)).unwrap();
    let pred = argmax(&y);
    assert!(pred.iter().all(|&p| p == pred[0]));
    let mut cm = ConfusionMatrix::new(4);
    cm.update(&pred, &labels).unwrap();
    let scored = labels.iter().filter(|&&l| l != 255).count() as f64;
    let max_prior = (0..4u8).map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / scored).fold(0.0, f64::max);
    assert!(compute_miou(&cm).mean <= max_prior);
}

#[test]
fn ensemble_averages_softmax() {
    let (a, data) = setup();
    let b = build_contextnet(&ContextNetConfig::cn14(4, 32, 64), 4).unwrap();
    let x = &data[0].image;
    let pa = softmax(&logits(&a, x, EvalMode::Normal).unwrap());
    let pb = softmax(&logits(&b, x, EvalMode::Normal).unwrap());
    let mut avg = pa.clone();
    avg.add_assign(&pb);
    assert_eq!(ensemble_predict(&a, &b, x).unwrap(), argmax(&avg));
}

#[test]
fn branch_zeroing_changes_predictions_shape_preserving() {
    let (g, data) = setup();
    for mode in [EvalMode::ZeroContext, EvalMode::ZeroDetail] {
        let p = predict(&g, &data[0].image, mode).unwrap();
        assert_eq!(p.len(), 32 * 64);
    }
    assert_eq!(aux_predict(&g, &data[0].image).unwrap().len(), 32 * 64);
}
