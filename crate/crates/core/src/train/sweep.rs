use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_domain, CurvePoint, EvalReport, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::routing::{
    module_sites, Activation, AdapterMode, AdapterSpec, DomainId, DomainPlan, MdaModel, ModulePath, Site, Stack,
};
use crate::store::{config_fingerprint, save_bundle, ParameterBundle};
use crate::synth::{gen_split, DomainStyle, Prototypes, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// One whole block per cell, every block of both encoder stacks.
    PerBlock,
    /// One module kind in the non-causal stack, or in both stacks.
    PerModule,
    /// Sequential / parallel FFN adapters at three bottlenecks, in the
    /// non-causal stack or both stacks.
    AdapterGrid,
    /// Combined adaptation recipes.
    Recipe,
    /// Per-domain prediction and joint networks.
    Decoder,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::PerBlock => "per-block",
            Self::PerModule => "per-module",
            Self::AdapterGrid => "adapter-grid",
            Self::Recipe => "recipe",
            Self::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "per-block" => Self::PerBlock,
            "per-module" => Self::PerModule,
            "adapter-grid" => Self::AdapterGrid,
            "recipe" => Self::Recipe,
            "decoder" => Self::Decoder,
            _ => return Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        })
    }
}

/// How a split is generated: fully determined by these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub split: String,
    pub domain: String,
    pub count: usize,
    pub global_seed: u64,
}

impl CorpusSpec {
    pub fn generate(&self) -> Result<Vec<Utterance>> {
        let style = DomainStyle::preset(&self.domain)?;
        let protos = Prototypes::new(self.global_seed, crate::synth::VOCAB, crate::synth::FEATURE_DIM);
        Ok(gen_split(&self.split, &style, &protos, self.count))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub train: TrainConfig,
    pub train_corpus: CorpusSpec,
    pub test_corpus: CorpusSpec,
    /// Adapter bottlenecks, smallest first; the largest is used by recipes.
    pub bottlenecks: Vec<usize>,
    pub eval_decoder: Stack,
    pub plan_seed: u64,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub row: String,
    pub column: String,
    pub plan: DomainPlan,
}

/// Everything needed to re-run one cell from a backbone bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub axis: SweepAxis,
    pub cell: SweepCell,
    pub model: ModelConfig,
    pub backbone_fingerprint: String,
    pub train: TrainConfig,
    pub train_corpus: CorpusSpec,
    pub test_corpus: CorpusSpec,
    pub eval_decoder: Stack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub manifest: CellManifest,
    pub trainable_params: usize,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub bundle: Option<ParameterBundle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub domain: String,
    pub eval_decoder: Stack,
    pub baseline: EvalReport,
    pub cells: Vec<CellResult>,
}

fn ffn_sites(config: &ModelConfig, stacks: &[Stack]) -> std::collections::BTreeSet<ModulePath> {
    module_sites(config, stacks, &[Site::FfnStart, Site::FfnEnd])
}

const NC: &[Stack] = &[Stack::NonCausal];
const BOTH: &[Stack] = &[Stack::Causal, Stack::NonCausal];

fn stacks_label(stacks: &[Stack]) -> &'static str {
    if stacks.len() == 2 {
        "C+NC"
    } else {
        "NC"
    }
}

/// The cells of an axis, in table order.
pub fn sweep_cells(
    axis: SweepAxis,
    config: &ModelConfig,
    domain: &str,
    bottlenecks: &[usize],
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let plan = |overrides, adapters| DomainPlan { domain: domain.to_owned(), overrides, adapters, seed };
    let mut cells = Vec::new();
    match axis {
        SweepAxis::PerBlock => {
            for stack in Stack::ENCODERS {
                for b in 0..config.encoder.blocks(stack) {
                    let path = ModulePath::block(stack, b);
                    cells.push(SweepCell {
                        name: path.to_string(),
                        row: stack.name().into(),
                        column: format!("block{b}"),
                        plan: plan([path].into(), vec![]),
                    });
                }
            }
        }
        SweepAxis::PerModule => {
            for site in Site::MODULES {
                for stacks in [NC, BOTH] {
                    cells.push(SweepCell {
                        name: format!("{}-{}", site.name(), stacks_label(stacks)),
                        row: site.name().into(),
                        column: stacks_label(stacks).into(),
                        plan: plan(module_sites(config, stacks, &[site]), vec![]),
                    });
                }
            }
        }
        SweepAxis::AdapterGrid => {
            if bottlenecks.len() != 3 {
                return Err(Error::Config("adapter grid needs exactly three bottlenecks".into()));
            }
            for mode in [AdapterMode::Sequential, AdapterMode::Parallel] {
                for &b in bottlenecks {
                    for stacks in [NC, BOTH] {
                        let spec = AdapterSpec {
                            mode,
                            sites: ffn_sites(config, stacks),
                            bottleneck: b,
                            activation: Activation::Swish,
                        };
                        cells.push(SweepCell {
                            name: format!("{}-b{b}-{}", mode.name(), stacks_label(stacks)),
                            row: format!("{} b={b}", mode.name()),
                            column: stacks_label(stacks).into(),
                            plan: plan(Default::default(), vec![spec]),
                        });
                    }
                }
            }
        }
        SweepAxis::Recipe => {
            let b = *bottlenecks.last().ok_or_else(|| Error::Config("recipes need a bottleneck".into()))?;
            let pa = AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: ffn_sites(config, BOTH),
                bottleneck: b,
                activation: Activation::Swish,
            };
            cells.push(SweepCell {
                name: "pa-ffn".into(),
                row: "PA on all FFN".into(),
                column: "recipe".into(),
                plan: plan(Default::default(), vec![pa]),
            });
            cells.push(SweepCell {
                name: "nc-ffn-end".into(),
                row: "NC ffn_end".into(),
                column: "recipe".into(),
                plan: plan(module_sites(config, NC, &[Site::FfnEnd]), vec![]),
            });
            let mut fin = DomainPlan::final_recipe(config, domain, b, seed);
            fin.seed = seed;
            cells.push(SweepCell {
                name: "pa-c-ffn+nc-ffn-end".into(),
                row: "PA C FFN + NC ffn_end".into(),
                column: "recipe".into(),
                plan: fin,
            });
        }
        SweepAxis::Decoder => {
            for (name, sites) in [
                ("prediction", vec![Site::Prediction]),
                ("joint", vec![Site::Joint]),
                ("prediction+joint", vec![Site::Prediction, Site::Joint]),
            ] {
                let overrides = sites.into_iter().map(|s| ModulePath::decoder(Stack::DecoderNonCausal, s)).collect();
                cells.push(SweepCell {
                    name: name.into(),
                    row: name.into(),
                    column: "NC decoder".into(),
                    plan: plan(overrides, vec![]),
                });
            }
        }
    }
    for c in &cells {
        c.plan.validate(config)?;
    }
    Ok(cells)
}

fn backbone_fingerprint(backbone: &MdaModel) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(ParameterBundle::backbone(backbone, 0).to_bytes());
    hex::encode(&digest[..16])
}

/// Trains and evaluates one cell on a fresh copy of the backbone.
pub fn run_cell(backbone: &MdaModel, manifest: &CellManifest, train: &[Utterance], test: &[Utterance]) -> CellResult {
    let mut model = backbone.clone();
    let outcome =
        train_domain(&mut model, manifest.cell.plan.clone(), train, &manifest.train).and_then(|(id, curve)| {
            let report = evaluate(&model, test, id, manifest.eval_decoder)?;
            let bundle = ParameterBundle::domain(&model, id, manifest.train.steps as u64)?;
            Ok((id, curve, report, bundle))
        });
    let trainable_params =
        crate::routing::domain_layout(&manifest.model, &manifest.cell.plan).iter().map(|s| s.numel()).sum();
    match outcome {
        Ok((_, curve, report, bundle)) => CellResult {
            manifest: manifest.clone(),
            trainable_params,
            report: Some(report),
            error: None,
            curve,
            bundle: Some(bundle),
        },
        Err(e) => CellResult {
            manifest: manifest.clone(),
            trainable_params,
            report: None,
            error: Some(e.to_string()),
            curve: vec![],
            bundle: None,
        },
    }
}

/// Re-runs a cell from its manifest, checking that `backbone` is the one
/// the manifest was recorded against.
pub fn rerun_cell(backbone: &MdaModel, manifest: &CellManifest) -> Result<CellResult> {
    if manifest.model != *backbone.config() {
        return Err(Error::FingerprintMismatch {
            expected: config_fingerprint(&manifest.model, None),
            found: config_fingerprint(backbone.config(), None),
        });
    }
    let found = backbone_fingerprint(backbone);
    if found != manifest.backbone_fingerprint {
        return Err(Error::FingerprintMismatch { expected: manifest.backbone_fingerprint.clone(), found });
    }
    let train = manifest.train_corpus.generate()?;
    let test = manifest.test_corpus.generate()?;
    Ok(run_cell(backbone, manifest, &train, &test))
}

/// Runs every cell of `cfg.axis` against `backbone`, at most `cfg.jobs`
/// cells at a time. Cell failures are recorded, not propagated.
pub fn sweep(backbone: &MdaModel, cfg: &SweepConfig) -> Result<SweepTable> {
    let domain = cfg.train_corpus.domain.clone();
    if cfg.test_corpus.domain != domain {
        return Err(Error::DomainMismatch { expected: domain, found: cfg.test_corpus.domain.clone() });
    }
    let train = cfg.train_corpus.generate()?;
    let test = cfg.test_corpus.generate()?;
    let cells = sweep_cells(cfg.axis, backbone.config(), &domain, &cfg.bottlenecks, cfg.plan_seed)?;
    let fingerprint = backbone_fingerprint(backbone);
    let manifests: Vec<CellManifest> = cells
        .into_iter()
        .map(|cell| CellManifest {
            axis: cfg.axis,
            cell,
            model: backbone.config().clone(),
            backbone_fingerprint: fingerprint.clone(),
            train: cfg.train.clone(),
            train_corpus: cfg.train_corpus.clone(),
            test_corpus: cfg.test_corpus.clone(),
            eval_decoder: cfg.eval_decoder,
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results = pool.install(|| manifests.par_iter().map(|m| run_cell(backbone, m, &train, &test)).collect());
    let baseline = evaluate(backbone, &test, DomainId::BACKBONE, cfg.eval_decoder)?;
    Ok(SweepTable {
        axis: cfg.axis,
        domain,
        eval_decoder: cfg.eval_decoder,
        baseline: EvalReport { domain: cfg.test_corpus.domain.clone(), ..baseline },
        cells: results,
    })
}

fn compact(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}k", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.manifest.cell.name == name)
    }

    /// Rows by columns of `error% (trainable params)`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        let mut cols: Vec<&str> = Vec::new();
        for c in &self.cells {
            let cell = &c.manifest.cell;
            if !rows.contains(&cell.row.as_str()) {
                rows.push(&cell.row);
            }
            if !cols.contains(&cell.column.as_str()) {
                cols.push(&cell.column);
            }
        }
        let text = |r: &str, col: &str| {
            self.cells
                .iter()
                .find(|c| c.manifest.cell.row == r && c.manifest.cell.column == col)
                .map(|c| match &c.report {
                    Some(rep) => format!("{:.1} ({})", 100.0 * rep.rate, compact(c.trainable_params)),
                    None => "failed".to_string(),
                })
                .unwrap_or_else(|| "-".into())
        };
        let mut grid: Vec<Vec<String>> =
            vec![std::iter::once("component".to_string()).chain(cols.iter().map(|c| c.to_string())).collect()];
        for r in &rows {
            grid.push(std::iter::once(r.to_string()).chain(cols.iter().map(|c| text(r, c))).collect());
        }
        let widths: Vec<usize> =
            (0..=cols.len()).map(|j| grid.iter().map(|row| row[j].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} sweep on {} ({} decoder); frozen backbone {:.1}% token error",
            self.axis.name(),
            self.domain,
            self.eval_decoder.name(),
            100.0 * self.baseline.rate
        );
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join(" | ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            }
        }
        out
    }

    /// Writes `table.json`, `table.txt` and per cell a manifest, the plan,
    /// the loss curve and the domain bundle under `dir/cells/<name>/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.json"), self.to_json())?;
        fs::write(dir.join("table.txt"), self.to_text())?;
        for c in &self.cells {
            let cell_dir = dir.join("cells").join(&c.manifest.cell.name);
            fs::create_dir_all(&cell_dir)?;
            fs::write(cell_dir.join("manifest.json"), serde_json::to_string_pretty(&c.manifest)?)?;
            fs::write(cell_dir.join("plan.json"), c.manifest.cell.plan.to_json())?;
            fs::write(cell_dir.join("curve.csv"), curve_csv(&c.curve))?;
            if let Some(b) = &c.bundle {
                save_bundle(b, &cell_dir.join("domain.mdab"))?;
            }
        }
        Ok(())
    }
}

/// `step,nll,decoder` lines with a header.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,nll,decoder\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.step, p.nll, p.decoder.name());
    }
    out
}
