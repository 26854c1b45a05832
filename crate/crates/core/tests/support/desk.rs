//! Desk-scale domain-shift run on the shipped presets: train a YT-like
//! backbone, measure it on VS-like data, then adapt with the backbone
//! frozen.

use std::time::{Duration, Instant};

use mda_core::routing::{
    module_sites, Activation, AdapterMode, AdapterSpec, DomainId, DomainPlan, MdaModel, Site, Stack,
};
use mda_core::synth::{gen_split, DomainStyle, Prototypes, Utterance, VS_LIKE, YT_LIKE};
use mda_core::train::{evaluate, train_backbone, train_domain, BackboneMode, EvalReport, TrainConfig};
use mda_core::ModelConfig;

pub const BACKBONE_STEPS: usize = 1500;
pub const DOMAIN_STEPS: usize = 400;
pub const TRAIN_UTTERANCES: usize = 4000;
pub const TEST_UTTERANCES: usize = 500;
/// Desk counterpart of the middle adapter width: b = 128 at d = 640.
pub const ADAPTER_BOTTLENECK: usize = 16;

#[derive(Debug)]
pub struct DeskRun {
    pub in_domain: EvalReport,
    pub out_of_domain: EvalReport,
    pub adapters: EvalReport,
    pub noncausal_ffn: EvalReport,
    pub causal_ffn: EvalReport,
    pub elapsed: Duration,
}

fn split(split: &str, domain: &str, count: usize) -> Vec<Utterance> {
    gen_split(split, &DomainStyle::preset(domain).unwrap(), &Prototypes::desk(), count)
}

fn adapt(backbone: &MdaModel, plan: DomainPlan, train: &[Utterance], test: &[Utterance]) -> EvalReport {
    let mut model = backbone.clone();
    let cfg = TrainConfig { steps: DOMAIN_STEPS, ..TrainConfig::default() };
    let (id, _) = train_domain(&mut model, plan, train, &cfg).unwrap();
    evaluate(&model, test, id, Stack::NonCausal).unwrap()
}

pub fn run() -> DeskRun {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let train = TrainConfig { steps: BACKBONE_STEPS, ..TrainConfig::default() };
    let (backbone, _) =
        train_backbone(&split("train", YT_LIKE, TRAIN_UTTERANCES), &cfg, YT_LIKE, &train, BackboneMode::SingleDomain)
            .unwrap();
    let vs_test = split("test", VS_LIKE, TEST_UTTERANCES);
    let in_domain =
        evaluate(&backbone, &split("test", YT_LIKE, TEST_UTTERANCES), DomainId::BACKBONE, Stack::NonCausal).unwrap();
    let out_of_domain = evaluate(&backbone, &vs_test, DomainId::BACKBONE, Stack::NonCausal).unwrap();

    let vs_train = split("train", VS_LIKE, TRAIN_UTTERANCES);
    let ffn = |stacks: &[Stack]| module_sites(&cfg, stacks, &[Site::FfnStart, Site::FfnEnd]);
    let plan = |overrides, adapters| DomainPlan { domain: VS_LIKE.into(), overrides, adapters, seed: 5 };
    let pa = AdapterSpec {
        mode: AdapterMode::Parallel,
        sites: ffn(&Stack::ENCODERS),
        bottleneck: ADAPTER_BOTTLENECK,
        activation: Activation::Swish,
    };
    let adapters = adapt(&backbone, plan(Default::default(), vec![pa]), &vs_train, &vs_test);
    let noncausal_ffn = adapt(&backbone, plan(ffn(&[Stack::NonCausal]), vec![]), &vs_train, &vs_test);
    let causal_ffn = adapt(&backbone, plan(ffn(&[Stack::Causal]), vec![]), &vs_train, &vs_test);
    DeskRun { in_domain, out_of_domain, adapters, noncausal_ffn, causal_ffn, elapsed: start.elapsed() }
}

impl DeskRun {
    /// `(description, holds)` for each property.
    pub fn properties(&self) -> Vec<(String, bool)> {
        let pct = |r: &EvalReport| 100.0 * r.rate;
        let (yt, vs) = (pct(&self.in_domain), pct(&self.out_of_domain));
        let (pa, nc, c) = (pct(&self.adapters), pct(&self.noncausal_ffn), pct(&self.causal_ffn));
        let reduction = if vs > 0.0 { 1.0 - pa / vs } else { 0.0 };
        vec![
            (format!("backbone in-domain {yt:.2}% <= 10%"), yt <= 10.0),
            (format!("backbone on vs-like {vs:.2}% >= 2 x in-domain {yt:.2}%"), vs >= 2.0 * yt && vs > 0.0),
            (
                format!(
                    "parallel adapters {pa:.2}% vs frozen {vs:.2}%: {:.1}% relative reduction >= 30%",
                    100.0 * reduction
                ),
                reduction >= 0.3,
            ),
            (format!("nc ffn overrides {nc:.2}% <= causal ffn overrides {c:.2}% + 1 point"), nc <= c + 1.0),
        ]
    }
}
