use std::fs;
use std::path::{Path, PathBuf};

use mda_core::conformer::{count_params, Selector};
use mda_core::routing::{
    adapter_params_per_site, domain_layout, module_sites, Activation, AdapterMode, AdapterSpec, DomainId, DomainPlan,
    MdaModel, Site, Stack,
};
use mda_core::store::{compose, diff, load_bundle, read_manifest, save_bundle, ParameterBundle};
use mda_core::synth::{
    corpus_stats, gen_split, load_split, save_split, DomainStyle, Prototypes, Utterance, FEATURE_DIM, VOCAB,
};
use mda_core::train::{
    curve_csv, evaluate, sweep, train_backbone, train_domain, with_domain_onehot, BackboneMode, CorpusSpec,
    SweepConfig, TrainConfig,
};
use mda_core::ModelConfig;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cli::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Written beside every command's outputs: enough to re-run it.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    resolved: Value,
    outputs: Vec<String>,
}

fn write_manifest(dir: &Path, command: &str, resolved: Value, outputs: &[&str]) -> Result<()> {
    let m = RunManifest {
        tool: "mda",
        version: VERSION,
        command,
        argv: std::env::args().collect(),
        resolved,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write(&dir.join("manifest.json"), pretty(&m))
}

fn model_config(args: &ModelArgs) -> Result<ModelConfig> {
    Ok(match &args.config {
        Some(path) => ModelConfig::from_json(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?,
        None => ModelConfig::preset(&args.preset)?,
    })
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: args.steps.unwrap_or(d.steps),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        warmup_steps: args.warmup_steps.unwrap_or(d.warmup_steps),
        peak_lr: args.lr.unwrap_or(d.peak_lr),
        clip_norm: args.clip_norm.unwrap_or(d.clip_norm),
        seed: args.seed.unwrap_or(d.seed),
        causal_decoder_prob: args.causal_prob.unwrap_or(d.causal_decoder_prob),
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn prototypes(global_seed: u64) -> Prototypes {
    Prototypes::new(global_seed, VOCAB, FEATURE_DIM)
}

fn style(domain: &str) -> Result<DomainStyle> {
    Ok(DomainStyle::preset(domain)?)
}

fn train_corpus(args: &CorpusArgs, domains: &[String]) -> Result<(Vec<Utterance>, Value)> {
    let protos = prototypes(args.global_seed);
    if let Some(path) = &args.data {
        let utts = load_split(path, &DomainStyle::presets(), &protos)?;
        return Ok((utts, json!({"data": path, "global_seed": args.global_seed})));
    }
    let mut utts = Vec::new();
    let mut specs = Vec::new();
    for d in domains {
        utts.extend(gen_split("train", &style(d)?, &protos, args.train_count));
        specs.push(CorpusSpec {
            split: "train".into(),
            domain: d.clone(),
            count: args.train_count,
            global_seed: args.global_seed,
        });
    }
    Ok((utts, serde_json::to_value(specs)?))
}

fn load_model(config: &ModelConfig, backbone: &Path, domains: &[PathBuf]) -> Result<MdaModel> {
    let b = load_bundle(backbone, config)?;
    let d = domains.iter().map(|p| load_bundle(p, config)).collect::<mda_core::Result<Vec<_>>>()?;
    Ok(compose(config, b, d)?)
}

pub fn gen_data(a: GenDataArgs) -> Result<Value> {
    create_dir(&a.out)?;
    let protos = prototypes(a.global_seed);
    let mut outputs = Vec::new();
    let mut stats = serde_json::Map::new();
    for d in &a.domains {
        let s = style(d)?;
        for (split, count) in [("train", a.train_count), ("test", a.test_count)] {
            let utts = gen_split(split, &s, &protos, count);
            let name = format!("{d}.{split}.jsonl");
            save_split(&a.out.join(&name), &utts)?;
            stats.insert(format!("{d}.{split}"), serde_json::to_value(corpus_stats(&utts).remove(d.as_str()))?);
            outputs.push(name);
        }
    }
    write(&a.out.join("stats.json"), pretty(&stats))?;
    outputs.push("stats.json".into());
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let resolved = json!({"domains": a.domains, "train_count": a.train_count, "test_count": a.test_count, "global_seed": a.global_seed});
    write_manifest(&a.out, "gen-data", resolved, &refs)?;
    Ok(json!({"out": a.out, "files": outputs, "stats": stats}))
}

pub fn train_backbone_cmd(a: TrainBackboneArgs) -> Result<Value> {
    let mut config = model_config(&a.model)?;
    let train = train_config(&a.train)?;
    let mode: BackboneMode = a.mode.into();
    let (domains, backbone_domain) = match mode {
        BackboneMode::SingleDomain => (vec![a.domain.clone()], a.domain.clone()),
        BackboneMode::MultidomainOnehot => {
            if a.domains.len() > a.onehot_width {
                return Err(CliError::Usage(format!(
                    "{} domains do not fit a one-hot of width {}",
                    a.domains.len(),
                    a.onehot_width
                )));
            }
            config = with_domain_onehot(config, a.onehot_width, &a.domains);
            config.validate()?;
            (a.domains.clone(), "multidomain".to_string())
        }
    };
    let (corpus, corpus_spec) = train_corpus(&a.corpus, &domains)?;
    create_dir(&a.out)?;
    let (model, curve) = train_backbone(&corpus, &config, &backbone_domain, &train, mode)?;
    let bundle = ParameterBundle::backbone(&model, train.steps as u64);
    save_bundle(&bundle, &a.out.join("backbone.mdab"))?;
    write(&a.out.join("model.json"), pretty(&config))?;
    write(&a.out.join("curve.csv"), curve_csv(&curve))?;
    let resolved = json!({"model": config, "train": train, "mode": mode, "corpus": corpus_spec, "backbone_domain": backbone_domain});
    write_manifest(&a.out, "train-backbone", resolved, &["backbone.mdab", "model.json", "curve.csv"])?;
    Ok(json!({
        "bundle": a.out.join("backbone.mdab"),
        "fingerprint": bundle.manifest.config_fingerprint,
        "params": bundle.params.numel(),
        "steps": curve.len(),
        "final_nll": curve.last().map(|p| p.nll),
    }))
}

fn recipe(config: &ModelConfig, r: RecipeArg, domain: &str, bottleneck: usize, seed: u64) -> DomainPlan {
    let ffn = |stacks: &[Stack]| module_sites(config, stacks, &[Site::FfnStart, Site::FfnEnd]);
    let plan = |overrides, adapters| DomainPlan { domain: domain.into(), overrides, adapters, seed };
    match r {
        RecipeArg::Final => DomainPlan::final_recipe(config, domain, bottleneck, seed),
        RecipeArg::PaFfn => plan(
            Default::default(),
            vec![AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: ffn(&Stack::ENCODERS),
                bottleneck,
                activation: Activation::Swish,
            }],
        ),
        RecipeArg::NcFfn => plan(ffn(&[Stack::NonCausal]), vec![]),
        RecipeArg::CFfn => plan(ffn(&[Stack::Causal]), vec![]),
        RecipeArg::NcFfnEnd => plan(module_sites(config, &[Stack::NonCausal], &[Site::FfnEnd]), vec![]),
    }
}

pub fn train_domain_cmd(a: TrainDomainArgs) -> Result<Value> {
    let config = model_config(&a.model)?;
    let train = train_config(&a.train)?;
    let plan = match (&a.plan, a.recipe) {
        (Some(path), _) => DomainPlan::from_json(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?,
        (None, Some(r)) => recipe(&config, r, &a.domain, a.bottleneck, a.plan_seed),
        (None, None) => return Err(CliError::Usage("one of --plan or --recipe is required".into())),
    };
    if plan.domain != a.domain {
        return Err(CliError::Usage(format!("plan is for `{}`, not `{}`", plan.domain, a.domain)));
    }
    plan.validate(&config)?;
    let mut model = load_model(&config, &a.backbone, &[])?;
    let (corpus, corpus_spec) = train_corpus(&a.corpus, std::slice::from_ref(&a.domain))?;
    create_dir(&a.out)?;
    let (id, curve) = train_domain(&mut model, plan.clone(), &corpus, &train)?;
    let bundle = ParameterBundle::domain(&model, id, train.steps as u64)?;
    save_bundle(&bundle, &a.out.join("domain.mdab"))?;
    write(&a.out.join("plan.json"), plan.to_json())?;
    write(&a.out.join("curve.csv"), curve_csv(&curve))?;
    let resolved =
        json!({"model": config, "train": train, "plan": plan, "corpus": corpus_spec, "backbone": a.backbone});
    write_manifest(&a.out, "train-domain", resolved, &["domain.mdab", "plan.json", "curve.csv"])?;
    Ok(json!({
        "bundle": a.out.join("domain.mdab"),
        "domain": a.domain,
        "domain_id": id,
        "trainable_params": bundle.params.numel(),
        "steps": curve.len(),
        "final_nll": curve.last().map(|p| p.nll),
    }))
}

pub fn eval_cmd(a: EvalArgs) -> Result<Value> {
    let config = model_config(&a.model)?;
    let model = load_model(&config, &a.backbone, &a.domain_bundles)?;
    let route = match &a.route {
        Some(name) => model.domain_id(name)?,
        None => model.domain_id(&a.domain).unwrap_or(DomainId::BACKBONE),
    };
    let protos = prototypes(a.global_seed);
    let test = match &a.data {
        Some(path) => load_split(path, &DomainStyle::presets(), &protos)?,
        None => gen_split("test", &style(&a.domain)?, &protos, a.test_count),
    };
    let report = evaluate(&model, &test, route, a.decoder.into())?;
    let out = json!({
        "test_domain": a.domain,
        "route": model.domain_name(route),
        "decoder": report.decoder,
        "utterances": report.utterances,
        "rate": report.rate,
        "substitutions": report.counts.substitutions,
        "insertions": report.counts.insertions,
        "deletions": report.counts.deletions,
        "reference_len": report.counts.reference_len,
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(&dir.join("eval.json"), pretty(&out))?;
        let resolved = json!({
            "model": config, "backbone": a.backbone, "domain_bundles": a.domain_bundles,
            "test": a.data.as_ref().map_or_else(
                || json!(CorpusSpec { split: "test".into(), domain: a.domain.clone(), count: a.test_count, global_seed: a.global_seed }),
                |p| json!({"data": p})),
        });
        write_manifest(dir, "eval", resolved, &["eval.json"])?;
    }
    Ok(out)
}

pub fn sweep_cmd(a: SweepArgs) -> Result<(Value, String)> {
    let config = model_config(&a.model)?;
    let model = load_model(&config, &a.backbone, &[])?;
    let corpus = |split: &str, count| CorpusSpec {
        split: split.into(),
        domain: a.domain.clone(),
        count,
        global_seed: a.global_seed,
    };
    let cfg = SweepConfig {
        axis: a.axis.into(),
        train: train_config(&a.train)?,
        train_corpus: corpus("train", a.train_count),
        test_corpus: corpus("test", a.test_count),
        bottlenecks: a.bottlenecks.clone(),
        eval_decoder: a.decoder.into(),
        plan_seed: a.plan_seed,
        jobs: a.jobs,
    };
    let table = sweep(&model, &cfg)?;
    table.write(&a.out)?;
    write_manifest(
        &a.out,
        "sweep",
        json!({"model": config, "backbone": a.backbone, "sweep": cfg}),
        &["table.json", "table.txt", "cells/"],
    )?;
    let failed: Vec<&str> =
        table.cells.iter().filter(|c| c.error.is_some()).map(|c| c.manifest.cell.name.as_str()).collect();
    let value = serde_json::from_str(&table.to_json())?;
    if !failed.is_empty() {
        eprintln!("{}", json!({"warning": "cells_failed", "cells": failed}));
    }
    Ok((value, table.to_text()))
}

fn human(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}k", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

pub fn params_cmd(a: ParamsArgs) -> Result<(Value, String)> {
    let config = model_config(&a.model)?;
    let stack: Stack = a.stack.parse().map_err(|_| CliError::Usage(format!("unknown stack `{}`", a.stack)))?;
    if let Some(sel) = &a.select {
        let mut stack = stack;
        let selector: Selector = sel.parse()?;
        if matches!(selector, Selector::Module(Site::Prediction | Site::Joint)) && stack.is_encoder() {
            stack = stack.partner();
        }
        let n = count_params(&config, stack, selector)?;
        return Ok((json!({"preset": config.name, "stack": stack, "select": sel, "count": n}), n.to_string()));
    }
    let mut rows: Vec<(String, String, usize)> = Vec::new();
    for s in Stack::ENCODERS {
        for site in Site::MODULES {
            rows.push((s.name().into(), site.name().into(), count_params(&config, s, Selector::Module(site))?));
        }
        for k in 0..config.encoder.blocks(s) {
            rows.push((s.name().into(), format!("block-{k}"), count_params(&config, s, Selector::Block(k))?));
        }
        rows.push((s.name().into(), "encoder".into(), count_params(&config, s, Selector::Encoder)?));
        rows.push((s.name().into(), "all".into(), count_params(&config, s, Selector::All)?));
    }
    let dec = Stack::DecoderNonCausal;
    let pred = count_params(&config, dec, Selector::Module(Site::Prediction))?;
    let joint = count_params(&config, dec, Selector::Module(Site::Joint))?;
    rows.push(("decoder".into(), "prediction".into(), pred));
    rows.push(("decoder".into(), "joint".into(), joint));
    rows.push(("decoder".into(), "total".into(), pred + joint));
    let sites = module_sites(&config, &[Stack::NonCausal], &[Site::FfnStart, Site::FfnEnd]).len();
    for &b in &a.bottlenecks {
        let plan_params = sites * adapter_params_per_site(config.encoder.d_noncausal, b);
        rows.push(("adapters noncausal ffn".into(), format!("b={b}"), plan_params));
    }
    let mut text = format!("parameter counts for preset `{}`\n", config.name);
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    for (group, name, n) in &rows {
        text.push_str(&format!("{group:<w0$}  {name:<w1$}  {n:>12}  {:>7}\n", human(*n)));
    }
    let value = json!({
        "preset": config.name,
        "rows": rows.iter().map(|(g, n, c)| json!({"group": g, "component": n, "count": c})).collect::<Vec<_>>(),
    });
    Ok((value, text.trim_end().to_owned()))
}

pub fn ckpt_cmd(c: CkptCommand) -> Result<(Value, Option<String>)> {
    match c {
        CkptCommand::Inspect { path, json: as_json } => {
            let m = read_manifest(&path)?;
            let floats: usize = m.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
            let value = json!({"path": path, "manifest": m, "entries": m.entries.len(), "values": floats});
            if as_json {
                return Ok((value, None));
            }
            let mut text = format!(
                "{}: domain `{}` (id {}), format {}, fingerprint {}, step {}, {} entries, {} values\n",
                path.display(),
                m.domain,
                m.domain_id,
                m.format_version,
                m.config_fingerprint,
                m.creation_step,
                m.entries.len(),
                floats
            );
            if let Some(plan) = &m.plan {
                text.push_str(&format!("plan: {}\n", serde_json::to_string(plan)?));
            }
            for e in &m.entries {
                text.push_str(&format!("  {} {:?}\n", e.key, e.shape));
            }
            Ok((value, Some(text.trim_end().to_owned())))
        }
        CkptCommand::Diff { a, b, model } => {
            let config = model_config(&model)?;
            let d = diff(&load_bundle(&a, &config)?, &load_bundle(&b, &config)?);
            Ok((json!({"identical": d.is_empty(), "diff": d}), None))
        }
        CkptCommand::Compose { backbone, domain_bundles, model, out } => {
            let config = model_config(&model)?;
            let composed = load_model(&config, &backbone, &domain_bundles)?;
            let domains: Vec<Value> = composed
                .domains()
                .map(|d| {
                    json!({
                        "id": d.id,
                        "name": d.name(),
                        "params": d.params.numel(),
                        "layout_params": domain_layout(&config, &d.plan).iter().map(|s| s.numel()).sum::<usize>(),
                        "overrides": d.plan.overrides,
                        "adapter_sites": d.plan.adapters.iter().map(|s| s.sites.len()).sum::<usize>(),
                    })
                })
                .collect();
            let value = json!({
                "backbone": backbone,
                "backbone_domain": composed.backbone_domain(),
                "backbone_params": composed.backbone().numel(),
                "fingerprint": config.fingerprint(),
                "domains": domains,
                "bundles": domain_bundles,
            });
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("compose.json"), pretty(&value))?;
                write_manifest(&dir, "ckpt compose", json!({"model": config}), &["compose.json"])?;
            }
            Ok((value, None))
        }
    }
}
