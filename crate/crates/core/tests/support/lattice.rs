//! Transducer loss against direct alignment enumeration, and HAT
//! normalization on real joint outputs.

use mda_core::model::Graph;
use mda_core::tensor::{Tape, Tensor};
use mda_core::transducer::{
    alignment_count, joint_lattice, lattice_loss, loss_bruteforce, predict, prediction_contexts, HatOutput,
};
use mda_core::{ModelConfig, Stack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// HAT log-probabilities of one lattice row, computed from scratch.
fn node_log_probs(row: &[f64]) -> (f64, Vec<f64>) {
    let b = row[0];
    let log_blank = -(1.0 + (-b).exp()).ln();
    let log_non_blank = -(1.0 + b.exp()).ln();
    let lse = row[1..].iter().map(|v| v.exp()).sum::<f64>().ln();
    (log_blank, row[1..].iter().map(|v| log_non_blank + v - lse).collect())
}

/// Sum of the probabilities of every path from `(t, u)` to the final blank,
/// with labels emitted at a frame before that frame's blank.
fn paths(logits: &Tensor<f64>, targets: &[usize], frames: usize, t: usize, u: usize, count: &mut u64) -> f64 {
    let width = logits.cols();
    let row = &logits.data()[(t * (targets.len() + 1) + u) * width..][..width];
    let (blank, labels) = node_log_probs(row);
    let mut total = 0.0;
    if u < targets.len() {
        total += labels[targets[u]].exp() * paths(logits, targets, frames, t, u + 1, count);
    }
    if t + 1 < frames {
        total += blank.exp() * paths(logits, targets, frames, t + 1, u, count);
    } else if u == targets.len() {
        *count += 1;
        total += blank.exp();
    }
    total
}

pub fn loss_matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for instance in 0..100 {
        let frames = rng.random_range(1..=4);
        let labels = rng.random_range(0..=3);
        let vocab = rng.random_range(2..=6);
        let targets: Vec<usize> = (0..labels).map(|_| rng.random_range(0..vocab)).collect();
        let logits = Tensor::from_fn([frames * (labels + 1), vocab + 1], |_| rng.random_range(-3.0..3.0));
        let mut count = 0;
        let expected = -paths(&logits, &targets, frames, 0, 0, &mut count).ln();
        assert_eq!(u128::from(count), alignment_count(frames, labels), "instance {instance}");

        let dp = lattice_loss(&logits, &targets, frames).unwrap().nll;
        assert!((dp - expected).abs() < 1e-8, "instance {instance}: dp {dp} vs {expected}");
        let brute = loss_bruteforce(&logits, &targets, frames).unwrap();
        assert!((brute - expected).abs() < 1e-8, "instance {instance}: brute force {brute} vs {expected}");

        let mut tape = Tape::<f64>::new();
        let l = tape.constant(logits.clone());
        let loss = tape.transducer_loss(l, &targets, frames).unwrap();
        let taped = tape.value(loss).item();
        assert!((taped - expected).abs() < 1e-8, "instance {instance}: tape {taped} vs {expected}");
    }
}

pub fn alignment_counts_are_binomial() {
    // Paths through a T x (U+1) lattice ending in the last frame's blank:
    // choose where the U labels fall among the first T - 1 blanks.
    assert_eq!(alignment_count(1, 3), 1);
    assert_eq!(alignment_count(2, 1), 2);
    assert_eq!(alignment_count(4, 3), 20);
    assert_eq!(alignment_count(10, 5), 2002);
}

pub fn hat_outputs_are_normalized_at_every_node() {
    let cfg = ModelConfig::desk();
    let backbone = cfg.init_backbone().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for stack in [Stack::DecoderCausal, Stack::DecoderNonCausal] {
        let frames = 7;
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..cfg.decoder.vocab_size)).collect();
        let mut g = Graph::backbone(&backbone);
        let enc = g
            .tape
            .constant(Tensor::from_fn([frames, cfg.encoder.joint_projection_dim], |_| rng.random_range(-4.0..4.0)));
        let (p1, p2) = prediction_contexts(&cfg.decoder, &targets).unwrap();
        let pred = predict(&mut g, &cfg.decoder, stack, &p1, &p2).unwrap();
        let z = joint_lattice(&mut g, stack, enc, pred).unwrap();
        let lattice = g.tape.value(z);
        assert_eq!(lattice.rows(), frames * (targets.len() + 1));
        for r in 0..lattice.rows() {
            let hat = HatOutput::from_row(lattice.row(r));
            let total = hat.log_p_blank().exp() + hat.log_p_labels().iter().map(|v| v.exp()).sum::<f64>();
            assert!((total - 1.0).abs() < 1e-6, "{stack} node {r}: mass {total}");
        }
    }
}

pub fn extreme_blank_logits_stay_normalized() {
    for b in [-60.0, -5.0, 0.0, 5.0, 60.0] {
        let hat = HatOutput { blank_logit: b, label_logits: vec![100.0, -100.0, 0.0] };
        let total = hat.log_p_blank().exp() + hat.log_p_labels().iter().map(|v| v.exp()).sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12, "blank logit {b}: mass {total}");
    }
}
