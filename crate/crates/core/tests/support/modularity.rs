//! Ownership and isolation: zero-initialized adapters, the backbone freeze,
//! cross-domain independence, composition and checkpoint integrity.

use mda_core::routing::{
    domain_layout, module_sites, Activation, AdapterMode, AdapterSpec, DomainEntry, DomainId, DomainPlan, MdaModel,
    ModulePath, Site, Stack,
};
use mda_core::store::{compose, diff, ParameterBundle};
use mda_core::synth::{gen_split, DomainStyle, Prototypes, Utterance, DT_LIKE, VS_LIKE, YT_LIKE};
use mda_core::train::{train_domain, TrainConfig};
use mda_core::{Error, ModelConfig, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn backbone_model() -> MdaModel {
    let cfg = ModelConfig::desk();
    let backbone = cfg.init_backbone();
    MdaModel::new(cfg, YT_LIKE, backbone).unwrap()
}

fn corpus(domain: &str, count: usize) -> Vec<Utterance> {
    gen_split("train", &DomainStyle::preset(domain).unwrap(), &Prototypes::desk(), count)
}

fn quick() -> TrainConfig {
    TrainConfig { steps: 3, batch_size: 2, warmup_steps: 1, ..TrainConfig::default() }
}

/// Parallel adapters on causal FFN sites, a sequential adapter on one
/// non-causal MHSA site and an override of the non-causal joint network.
fn mixed_plan(cfg: &ModelConfig, domain: &str, seed: u64) -> DomainPlan {
    DomainPlan {
        domain: domain.into(),
        overrides: [
            ModulePath::module(Stack::NonCausal, 1, Site::Conv),
            ModulePath::decoder(Stack::DecoderNonCausal, Site::Joint),
        ]
        .into(),
        adapters: vec![
            AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: module_sites(cfg, &[Stack::Causal], &[Site::FfnStart, Site::FfnEnd]),
                bottleneck: 8,
                activation: Activation::Swish,
            },
            AdapterSpec {
                mode: AdapterMode::Sequential,
                sites: [ModulePath::module(Stack::NonCausal, 2, Site::Mhsa)].into(),
                bottleneck: 4,
                activation: Activation::Swish,
            },
        ],
        seed,
    }
}

fn features(seed: u64, frames: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([frames, 16], |_| rng.random_range(-1.0..1.0))
}

fn outputs(model: &MdaModel, id: DomainId) -> (Tensor<f32>, Tensor<f32>) {
    let out = model.forward_with_domain(&features(9, 23), id).unwrap();
    (out.causal, out.noncausal.unwrap())
}

fn same(a: &(Tensor<f32>, Tensor<f32>), b: &(Tensor<f32>, Tensor<f32>)) -> bool {
    a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1)
}

pub fn zero_init_adapters_are_identity() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let plan = DomainPlan {
        domain: VS_LIKE.into(),
        overrides: Default::default(),
        adapters: vec![
            AdapterSpec {
                mode: AdapterMode::Sequential,
                sites: module_sites(&cfg, &[Stack::NonCausal], &Site::MODULES),
                bottleneck: 8,
                activation: Activation::Swish,
            },
            AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: module_sites(&cfg, &[Stack::Causal], &Site::MODULES),
                bottleneck: 16,
                activation: Activation::Identity,
            },
        ],
        seed: 4,
    };
    let id = model.register_domain(plan).unwrap();
    assert!(same(&outputs(&model, id), &outputs(&model, DomainId::BACKBONE)));
}

pub fn training_freezes_backbone_and_touches_only_the_mask() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let before = ParameterBundle::backbone(&model, 0).to_bytes();
    let plan = mixed_plan(&cfg, VS_LIKE, 11);

    let mut fresh = model.clone();
    let init_id = fresh.register_domain(plan.clone()).unwrap();
    let init = ParameterBundle::domain(&fresh, init_id, 0).unwrap();

    let (id, curve) = train_domain(&mut model, plan, &corpus(VS_LIKE, 6), &quick()).unwrap();
    assert_eq!(curve.len(), 3);
    assert_eq!(ParameterBundle::backbone(&model, 0).to_bytes(), before, "backbone bytes changed");

    let trained = ParameterBundle::domain(&model, id, 3).unwrap();
    let d = diff(&init, &trained);
    assert!(d.added.is_empty() && d.removed.is_empty());
    let changed: std::collections::BTreeSet<String> = d.changed.into_iter().map(|(k, _)| k).collect();
    assert_eq!(changed, model.trainable_mask(id).unwrap());
    assert!(model.trainable_mask(DomainId::BACKBONE).unwrap().is_empty());
}

pub fn empty_plan_is_rejected() {
    let mut model = backbone_model();
    let err = train_domain(&mut model, DomainPlan::empty(VS_LIKE), &corpus(VS_LIKE, 2), &quick()).unwrap_err();
    assert!(matches!(err, Error::NothingTrainable(_)));
    assert_eq!(model.domains().count(), 0);
    let plan = mixed_plan(model.config(), VS_LIKE, 1);
    let err = train_domain(&mut model, plan, &corpus(DT_LIKE, 2), &quick()).unwrap_err();
    assert!(matches!(err, Error::DomainMismatch { .. }));
}

pub fn domains_are_isolated_from_each_other() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let (a, _) = train_domain(&mut model, mixed_plan(&cfg, VS_LIKE, 1), &corpus(VS_LIKE, 4), &quick()).unwrap();
    let reference = outputs(&model, a);
    let backbone_ref = outputs(&model, DomainId::BACKBONE);

    let (b, _) = train_domain(&mut model, mixed_plan(&cfg, DT_LIKE, 2), &corpus(DT_LIKE, 4), &quick()).unwrap();
    assert!(same(&outputs(&model, a), &reference), "adding a domain changed another");
    assert!(!same(&outputs(&model, b), &reference));

    let retrain = TrainConfig { seed: 99, ..quick() };
    model.remove_domain(b).unwrap();
    let (b2, _) = train_domain(&mut model, mixed_plan(&cfg, DT_LIKE, 3), &corpus(DT_LIKE, 4), &retrain).unwrap();
    assert_eq!(b2, b, "freed ids are reused");
    assert!(same(&outputs(&model, a), &reference), "retraining a domain changed another");
    model.remove_domain(b2).unwrap();
    assert!(same(&outputs(&model, a), &reference), "removing a domain changed another");
    assert!(same(&outputs(&model, DomainId::BACKBONE), &backbone_ref));
}

pub fn composition_is_order_independent() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let a = model.register_domain(mixed_plan(&cfg, VS_LIKE, 5)).unwrap();
    let b = model.register_domain(mixed_plan(&cfg, DT_LIKE, 6)).unwrap();
    let backbone = ParameterBundle::backbone(&model, 0);
    let ba = ParameterBundle::domain(&model, a, 0).unwrap();
    let bb = ParameterBundle::domain(&model, b, 0).unwrap();

    let m1 = compose(&cfg, backbone.clone(), vec![ba.clone(), bb.clone()]).unwrap();
    let m2 = compose(&cfg, backbone.clone(), vec![bb.clone(), ba.clone()]).unwrap();
    for id in [DomainId::BACKBONE, a, b] {
        assert!(same(&outputs(&m1, id), &outputs(&m2, id)));
        assert!(same(&outputs(&m1, id), &outputs(&model, id)));
    }
    assert_eq!(m1.domain_id(DT_LIKE).unwrap(), b);
    assert!(matches!(compose(&cfg, backbone.clone(), vec![ba.clone(), ba]), Err(Error::DuplicateDomain(_))));
    assert!(compose(&cfg, bb.clone(), vec![]).is_err());
}

pub fn checkpoints_round_trip_and_reject_foreign_configs() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let id = model.register_domain(mixed_plan(&cfg, VS_LIKE, 8)).unwrap();
    for bundle in [ParameterBundle::backbone(&model, 12), ParameterBundle::domain(&model, id, 12).unwrap()] {
        let bytes = bundle.to_bytes();
        let back = ParameterBundle::from_bytes(&bytes, &cfg).unwrap();
        assert!(back.params.bit_eq(&bundle.params));
        assert_eq!(back.manifest, bundle.manifest);
        assert_eq!(back.to_bytes(), bytes);

        let mut other = cfg.clone();
        other.encoder.conv_kernel = 5;
        assert!(matches!(ParameterBundle::from_bytes(&bytes, &other), Err(Error::FingerprintMismatch { .. })));
        let mut reseeded = cfg.clone();
        reseeded.init_seed += 1;
        assert!(matches!(ParameterBundle::from_bytes(&bytes, &reseeded), Err(Error::FingerprintMismatch { .. })));
    }
}

pub fn resolution_follows_the_plan() {
    let mut model = backbone_model();
    let cfg = model.config().clone();
    let plan = DomainPlan {
        domain: VS_LIKE.into(),
        overrides: [ModulePath::block(Stack::NonCausal, 3)].into(),
        adapters: vec![],
        seed: 0,
    };
    let id = model.register_domain(plan.clone()).unwrap();
    use mda_core::Owner;
    assert_eq!(model.resolve(&ModulePath::module(Stack::NonCausal, 3, Site::Conv), id).unwrap(), Owner::Domain(id));
    assert_eq!(model.resolve(&ModulePath::module(Stack::NonCausal, 2, Site::Conv), id).unwrap(), Owner::Backbone);
    assert_eq!(
        model.resolve(&ModulePath::module(Stack::NonCausal, 3, Site::Conv), DomainId::BACKBONE).unwrap(),
        Owner::Backbone
    );
    let keys: Vec<String> = domain_layout(&cfg, &plan).into_iter().map(|s| s.key).collect();
    assert!(keys.iter().all(|k| k.starts_with("noncausal.block3.")));
    assert!(keys.iter().any(|k| k == "noncausal.block3.norm.gamma"));
    assert!(matches!(model.resolve(&ModulePath::module(Stack::Causal, 0, Site::Mhsa), id), Err(Error::InvalidPath(_))));
    let mut params = ParamSet::new();
    params.insert("noncausal.block3.norm.gamma", Tensor::zeros([80]));
    let entry = DomainEntry { id: DomainId(7), plan: DomainPlan { domain: DT_LIKE.into(), ..plan }, params };
    assert!(model.insert_domain(entry).is_err());
}
