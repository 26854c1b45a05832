//! Parameter accounting at the paper preset against closed-form counts and
//! the published component sizes.

use mda_core::conformer::{count_params, Selector};
use mda_core::routing::{adapter_layout, adapter_params_per_site, module_sites, Site, Stack};
use mda_core::ModelConfig;

fn within(actual: usize, published: f64, tol: f64) -> bool {
    ((actual as f64 - published) / published).abs() <= tol
}

// Closed-form sizes of one module at model dim `d`.
fn ffn(d: usize, mult: usize) -> usize {
    2 * d + d * mult * d + mult * d + mult * d * d + d
}
fn mhsa_rel(d: usize) -> usize {
    2 * d + 4 * (d * d + d) + d * d + 2 * d
}
fn mhsa_abs(d: usize) -> usize {
    2 * d + 4 * (d * d + d)
}
fn conv(d: usize, k: usize) -> usize {
    2 * d + (2 * d * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d)
}

pub fn closed_forms_at_paper_dims() {
    assert_eq!(ffn(640, 4), 3_281_280);
    assert_eq!(mhsa_rel(640), 2_053_120);
    assert_eq!(conv(640, 15), 1_243_520);
}

pub fn noncausal_modules_match_layout() {
    let cfg = ModelConfig::paper();
    let nc = Stack::NonCausal;
    let count = |s| count_params(&cfg, nc, s).unwrap();
    assert_eq!(count(Selector::Module(Site::FfnStart)), 32_812_800);
    assert_eq!(count(Selector::Module(Site::FfnEnd)), 10 * ffn(640, 4));
    assert_eq!(count(Selector::Module(Site::Mhsa)), 10 * mhsa_rel(640));
    assert_eq!(count(Selector::Module(Site::Conv)), 10 * conv(640, 15));
    assert_eq!(count(Selector::Block(0)), 2 * ffn(640, 4) + mhsa_rel(640) + conv(640, 15) + 2 * 640);
    let projections = (512 * 640 + 640) + (640 * 384 + 384);
    assert_eq!(count(Selector::All), count(Selector::Encoder) + projections);

    assert!(within(count(Selector::Module(Site::FfnStart)), 32.8e6, 0.01));
    assert!(within(count(Selector::Module(Site::Mhsa)), 20.5e6, 0.02));
    assert!(within(count(Selector::Module(Site::Conv)), 12.4e6, 0.02));
    assert!(within(count(Selector::Block(3)), 10e6, 0.03));
    assert!(within(count(Selector::All), 99e6, 0.02));
}

pub fn causal_block_with_attention() {
    let cfg = ModelConfig::paper();
    let block = count_params(&cfg, Stack::Causal, Selector::Block(2)).unwrap();
    assert_eq!(block, 2 * ffn(512, 4) + mhsa_abs(512) + conv(512, 15) + 2 * 512);
    assert!(within(block, 6e6, 0.03));
    let no_attention = count_params(&cfg, Stack::Causal, Selector::Block(0)).unwrap();
    assert_eq!(block - no_attention, mhsa_abs(512));
}

pub fn decoder_networks() {
    let cfg = ModelConfig::paper();
    let pred = count_params(&cfg, Stack::DecoderNonCausal, Selector::Module(Site::Prediction)).unwrap();
    let joint = count_params(&cfg, Stack::DecoderNonCausal, Selector::Module(Site::Joint)).unwrap();
    assert_eq!(pred, 2 * 4097 * 640 + 2 * 640 * 640 + 640);
    assert_eq!(joint, 384 * 640 + 640 * 640 + 640 + 640 * 4097 + 4097);
    assert!(within(pred, 6.1e6, 0.02));
    assert!(within(joint, 3.3e6, 0.02));
    assert!(within(pred + joint, 9.5e6, 0.03));
    assert_eq!(count_params(&cfg, Stack::DecoderCausal, Selector::All).unwrap(), pred + joint);
}

pub fn adapters_on_noncausal_ffn_sites() {
    let cfg = ModelConfig::paper();
    let sites = module_sites(&cfg, &[Stack::NonCausal], &[Site::FfnStart, Site::FfnEnd]);
    assert_eq!(sites.len(), 20);
    for (b, published) in [(64, 1.7e6), (128, 3.3e6), (256, 6.6e6)] {
        let allocated: usize = sites.iter().flat_map(|s| adapter_layout(&cfg, s, b)).map(|s| s.numel()).sum();
        assert_eq!(allocated, 20 * adapter_params_per_site(640, b));
        assert!(within(allocated, published, 0.05), "b={b}: {allocated}");
    }
    assert_eq!(20 * adapter_params_per_site(640, 64), 1_652_480);
}
