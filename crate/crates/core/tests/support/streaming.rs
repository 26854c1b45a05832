//! Look-ahead contracts: causal outputs never see the future, non-causal
//! outputs see exactly the configured right context.

use mda_core::routing::{
    domain_layout, module_sites, Activation, AdapterMode, AdapterSpec, DomainEntry, DomainId, DomainPlan, MdaModel,
    Site, Stack,
};
use mda_core::{ModelConfig, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 30;

fn random_set(rng: &mut ChaCha8Rng, specs: &[mda_core::model::ParamSpec]) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    for s in specs {
        p.insert(s.key.clone(), Tensor::from_fn(s.shape.clone(), |_| rng.random_range(-0.4..0.4)));
    }
    p
}

/// Desk-shaped model with random weights everywhere and one domain whose
/// adapters and overrides are live.
fn model(cfg: ModelConfig) -> (MdaModel, DomainId) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let backbone = random_set(&mut rng, &cfg.backbone_layout());
    let mut m = MdaModel::new(cfg.clone(), "yt-like", backbone).unwrap();
    let plan = DomainPlan {
        domain: "vs-like".into(),
        overrides: module_sites(&cfg, &[Stack::NonCausal], &[Site::Conv]),
        adapters: vec![AdapterSpec {
            mode: AdapterMode::Parallel,
            sites: module_sites(&cfg, &Stack::ENCODERS, &[Site::FfnStart, Site::Mhsa]),
            bottleneck: 4,
            activation: Activation::Swish,
        }],
        seed: 2,
    };
    let params = random_set(&mut rng, &domain_layout(&cfg, &plan));
    m.insert_domain(DomainEntry { id: DomainId(1), plan, params }).unwrap();
    (m, DomainId(1))
}

fn input(seed: u64, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([FRAMES, width], |_| rng.random_range(-1.0..1.0))
}

/// `x` with every frame at or after `from` replaced by fresh noise.
fn perturb_from(x: &Tensor<f32>, from: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = x.cols();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if i / cols >= from {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    y
}

fn rows_equal(a: &Tensor<f32>, b: &Tensor<f32>, upto: usize) -> bool {
    (0..upto).all(|t| a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn check_config(cfg: ModelConfig) {
    let right = cfg.encoder.total_right_context();
    let (m, vs) = model(cfg.clone());
    let x = input(1, cfg.encoder.feature_dim);
    for domain in [DomainId::BACKBONE, vs] {
        let base = m.forward_with_domain(&x, domain).unwrap();
        let base_nc = base.noncausal.unwrap();
        for from in 1..FRAMES {
            let y = perturb_from(&x, from, from as u64);
            let out = m.forward_with_domain(&y, domain).unwrap();
            assert!(rows_equal(&base.causal, &out.causal, from), "causal output before frame {from} saw the future");
            assert!(!out.causal.row(from).iter().zip(base.causal.row(from)).all(|(a, b)| a == b));
            let nc = out.noncausal.unwrap();
            let safe = from.saturating_sub(right);
            assert!(rows_equal(&base_nc, &nc, safe), "non-causal output before frame {safe} saw beyond {right} frames");
            if from >= right + 1 {
                // The budget is tight: the frame exactly `right` frames back
                // does see the perturbation.
                assert!(!rows_equal(&base_nc, &nc, safe + 1), "right context shorter than {right} at frame {from}");
            }
        }
    }
}

pub fn desk_lookahead_contract() {
    check_config(ModelConfig::desk());
}

pub fn odd_context_budgets() {
    for right in [0, 3, 5, 13] {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.right_context_frames = right;
        assert_eq!(cfg.encoder.total_right_context(), right);
        check_config(cfg);
    }
}

pub fn relative_position_in_causal_stack() {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.causal_relative_position = true;
    cfg.encoder.mhsa_skip_first_n = 0;
    check_config(cfg);
}
