//! Analytic gradients against central finite differences in f64.

use std::sync::Arc;

use mda_core::model::{Graph, Owner, ParamSet};
use mda_core::routing::{
    adapter_branch, apply_adapter, domain_layout, Activation, AdapterMode, AdapterSpec, AdapterVars, DomainEntry,
    DomainId, DomainPlan, MdaModel, ModulePath, Site, Stack,
};
use mda_core::tensor::{finite_diff_grad, grad_rel_err, Tape, Tensor, Var};
use mda_core::transducer::transducer_loss;
use mda_core::{conformer, encode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 10;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Fixed, shape-dependent weights so the scalar loss `sum(y * r)` exercises
/// every output coordinate differently.
fn weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| (1.3 * i as f64 + 0.7).sin())
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
    let r = tape.constant(weights(tape.shape(y)));
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}

/// Max relative error over all inputs of `build`, which maps leaves to an
/// output whose weighted sum is differentiated.
fn check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &leaves);
    let loss = weighted_sum(&mut tape, y);
    let grads = tape.backward(loss).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let y = build(&mut tape, &leaves);
            let loss = weighted_sum(&mut tape, y);
            tape.value(loss).item()
        },
        inputs,
        EPS,
    )
    .unwrap();
    leaves
        .iter()
        .zip(&numeric)
        .map(|(v, n)| {
            let zero = Tensor::zeros(n.shape().to_vec());
            grad_rel_err(grads.get(*v).unwrap_or(&zero), n)
        })
        .fold(0.0, f64::max)
}

fn over_instances(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let err = case(&mut rng);
        assert!(err < TOL, "{name}: instance {i} rel err {err:e}");
    }
}

pub fn matmul_gradients() {
    over_instances("matmul", |rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let (a, b) = (rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k, n], 1.0));
        check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap())
    });
    over_instances("matmul_t", |rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let (a, b) = (rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[n, k], 1.0));
        check(&[a, b], |t, v| t.matmul_t(v[0], v[1]).unwrap())
    });
}

pub fn elementwise_binary_gradients() {
    over_instances("add", |rng| {
        let s = [rng.random_range(1..4), rng.random_range(1..5)];
        check(&[rand_tensor(rng, &s, 1.0), rand_tensor(rng, &s, 1.0)], |t, v| t.add(v[0], v[1]).unwrap())
    });
    over_instances("mul", |rng| {
        let s = [rng.random_range(1..4), rng.random_range(1..5)];
        check(&[rand_tensor(rng, &s, 1.0), rand_tensor(rng, &s, 1.0)], |t, v| t.mul(v[0], v[1]).unwrap())
    });
    over_instances("add_bias", |rng| {
        let (r, c) = (rng.random_range(1..4), rng.random_range(1..5));
        check(&[rand_tensor(rng, &[r, c], 1.0), rand_tensor(rng, &[c], 1.0)], |t, v| t.add_bias(v[0], v[1]).unwrap())
    });
    over_instances("scale", |rng| {
        let f = rng.random_range(-2.0..2.0);
        check(&[rand_tensor(rng, &[3, 2], 1.0)], |t, v| t.scale(v[0], f).unwrap())
    });
}

pub fn shape_op_gradients() {
    over_instances("concat", |rng| {
        let axis = rng.random_range(0..2);
        let shapes: Vec<[usize; 2]> =
            (0..3).map(|_| if axis == 0 { [rng.random_range(1..3), 3] } else { [2, rng.random_range(1..3)] }).collect();
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(rng, s, 1.0)).collect();
        check(&inputs, |t, v| t.concat(v, axis).unwrap())
    });
    over_instances("slice", |rng| {
        let axis = rng.random_range(0..2);
        let start = rng.random_range(0..3);
        let len = rng.random_range(1..=4 - start);
        check(&[rand_tensor(rng, &[4, 4], 1.0)], |t, v| t.slice(v[0], axis, start, len).unwrap())
    });
    over_instances("transpose", |rng| {
        let s = [rng.random_range(1..4), rng.random_range(1..5)];
        check(&[rand_tensor(rng, &s, 1.0)], |t, v| t.transpose(v[0]).unwrap())
    });
    over_instances("reshape", |rng| {
        check(&[rand_tensor(rng, &[2, 6], 1.0)], |t, v| t.reshape(v[0], vec![3, 4]).unwrap())
    });
    over_instances("sum", |rng| {
        let x = rand_tensor(rng, &[3, 3], 1.0);
        check(&[x], |t, v| {
            let s = t.sum(v[0]).unwrap();
            t.reshape(s, vec![1]).unwrap()
        })
    });
    over_instances("mean", |rng| {
        let x = rand_tensor(rng, &[2, 5], 1.0);
        check(&[x], |t, v| {
            let s = t.mean(v[0]).unwrap();
            t.reshape(s, vec![1]).unwrap()
        })
    });
    over_instances("embedding", |rng| {
        let rows = rng.random_range(2..6);
        let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..rows)).collect();
        check(&[rand_tensor(rng, &[rows, 3], 1.0)], |t, v| t.embedding(v[0], &idx).unwrap())
    });
    over_instances("rel_shift", |rng| {
        let n = rng.random_range(1..5);
        check(&[rand_tensor(rng, &[n, 2 * n - 1], 1.0)], |t, v| t.rel_shift(v[0]).unwrap())
    });
}

pub fn normalization_gradients() {
    over_instances("layer_norm", |rng| {
        let (r, c) = (rng.random_range(1..4), rng.random_range(2..7));
        let inputs = [rand_tensor(rng, &[r, c], 2.0), rand_tensor(rng, &[c], 1.5), rand_tensor(rng, &[c], 1.0)];
        check(&inputs, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
    });
    over_instances("group_norm", |rng| {
        let groups = rng.random_range(1..4);
        let c = groups * rng.random_range(1..3);
        let frames = rng.random_range(1..5);
        let inputs = [rand_tensor(rng, &[frames, c], 2.0), rand_tensor(rng, &[c], 1.5), rand_tensor(rng, &[c], 1.0)];
        check(&inputs, |t, v| t.group_norm(v[0], v[1], v[2], groups, 1e-5).unwrap())
    });
}

pub fn activation_gradients() {
    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let ops: [(&str, Unary); 6] = [
        ("softmax", |t, x| t.softmax(x).unwrap()),
        ("log_softmax", |t, x| t.log_softmax(x).unwrap()),
        ("sigmoid", |t, x| t.sigmoid(x).unwrap()),
        ("tanh", |t, x| t.tanh(x).unwrap()),
        ("swish", |t, x| t.swish(x).unwrap()),
        ("glu", |t, x| t.glu(x).unwrap()),
    ];
    for (name, op) in ops {
        over_instances(name, |rng| {
            let s = [rng.random_range(1..4), 2 * rng.random_range(1..4)];
            check(&[rand_tensor(rng, &s, 3.0)], |t, v| op(t, v[0]))
        });
    }
}

pub fn sequence_op_gradients() {
    over_instances("depthwise_conv1d", |rng| {
        let k = rng.random_range(1..5);
        let right = rng.random_range(0..k);
        let (frames, c) = (rng.random_range(1..7), rng.random_range(1..4));
        let inputs = [rand_tensor(rng, &[frames, c], 1.0), rand_tensor(rng, &[k, c], 1.0)];
        check(&inputs, |t, v| t.depthwise_conv1d(v[0], v[1], k - 1 - right, right).unwrap())
    });
    over_instances("masked_fill", |rng| {
        let n = rng.random_range(2..5);
        let mask: Arc<[bool]> = (0..n * n).map(|i| i % n != 0 && rng.random_bool(0.4)).collect();
        check(&[rand_tensor(rng, &[n, n], 2.0)], |t, v| {
            let m = t.masked_fill(v[0], mask.clone(), -1e9).unwrap();
            t.softmax(m).unwrap()
        })
    });
    over_instances("transducer_loss", |rng| {
        let frames = rng.random_range(1..5);
        let labels = rng.random_range(0..4);
        let vocab = rng.random_range(2..5);
        let targets: Vec<usize> = (0..labels).map(|_| rng.random_range(0..vocab)).collect();
        let logits = rand_tensor(rng, &[frames * (labels + 1), vocab + 1], 2.0);
        check(&[logits], |t, v| {
            let l = t.transducer_loss(v[0], &targets, frames).unwrap();
            t.reshape(l, vec![1]).unwrap()
        })
    });
}

pub fn adapter_gradients() {
    for (mode, act) in
        [("branch", Activation::Swish), ("residual", Activation::Swish), ("linear", Activation::Identity)]
    {
        over_instances(mode, |rng| {
            let (frames, d, b) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..4));
            let inputs = [
                rand_tensor(rng, &[frames, d], 1.0),
                rand_tensor(rng, &[d, b], 1.0),
                rand_tensor(rng, &[b], 1.0),
                rand_tensor(rng, &[b, d], 1.0),
                rand_tensor(rng, &[d], 1.0),
            ];
            check(&inputs, |t, v| {
                let p = AdapterVars { w_down: v[1], b_down: v[2], w_up: v[3], b_up: v[4] };
                if mode == "residual" {
                    apply_adapter(t, v[0], &p, act).unwrap()
                } else {
                    adapter_branch(t, v[0], &p, act).unwrap()
                }
            })
        });
    }
}

/// Two-block model (one causal, one non-causal block) small enough for
/// coordinate-wise differencing of every parameter.
fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.encoder.feature_dim = 3;
    c.encoder.causal_blocks = 1;
    c.encoder.noncausal_blocks = 1;
    c.encoder.d_causal = 4;
    c.encoder.d_noncausal = 4;
    c.encoder.ffn_multiplier = 2;
    c.encoder.num_heads = 2;
    c.encoder.conv_kernel = 3;
    c.encoder.conv_norm_groups = 2;
    c.encoder.mhsa_skip_first_n = 0;
    c.encoder.right_context_frames = 2;
    c.encoder.joint_projection_dim = 3;
    c.decoder.vocab_size = 3;
    c.decoder.embed_dim = 2;
    c.decoder.joint_dim = 3;
    c.validate().unwrap();
    c
}

fn random_params(rng: &mut ChaCha8Rng, specs: &[mda_core::model::ParamSpec]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for s in specs {
        p.insert(s.key.clone(), rand_tensor(rng, &s.shape, 0.6));
    }
    p
}

/// Checks `d loss / d p` for every parameter of `set` whose key passes
/// `select`, where `loss` reads its parameters through a graph.
fn check_params<F>(set: &ParamSet<f64>, select: impl Fn(&str) -> bool, loss: F) -> f64
where
    F: Fn(&ParamSet<f64>, bool) -> (Tape<f64>, Var, Vec<(String, Var)>),
{
    let (tape, l, leaves) = loss(set, true);
    let grads = tape.backward(l).unwrap();
    let keys: Vec<String> = set.keys().filter(|k| select(k)).cloned().collect();
    assert!(!keys.is_empty());
    let values: Vec<Tensor<f64>> = keys.iter().map(|k| set.get(k).unwrap().clone()).collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut s = set.clone();
            for (k, v) in keys.iter().zip(p) {
                s.insert(k.clone(), v.clone());
            }
            let (tape, l, _) = loss(&s, false);
            tape.value(l).item()
        },
        &values,
        EPS,
    )
    .unwrap();
    keys.iter()
        .zip(&numeric)
        .map(|(k, n)| {
            let zero = Tensor::zeros(n.shape().to_vec());
            let analytic = leaves.iter().find(|(key, _)| key == k).and_then(|(_, v)| grads.get(*v)).unwrap_or(&zero);
            grad_rel_err(analytic, n)
        })
        .fold(0.0, f64::max)
}

fn leaves(g: &Graph<'_, f64>) -> Vec<(String, Var)> {
    g.trainable_leaves().into_iter().map(|(_, k, v)| (k, v)).collect()
}

pub fn conformer_module_gradients() {
    let cfg = tiny_config();
    let enc = cfg.encoder.clone();
    for site in Site::MODULES {
        for stack in Stack::ENCODERS {
            let path = ModulePath::module(stack, 0, site);
            let prefix = format!("{path}.");
            over_instances(&path.to_string(), |rng| {
                let backbone = random_params(rng, &cfg.backbone_layout());
                let frames = rng.random_range(1..6);
                let x = rand_tensor(rng, &[frames, enc.dim(stack)], 1.0);
                check_params(
                    &backbone,
                    |k| k.starts_with(&prefix),
                    |set, _| {
                        let mut g = Graph::new(set, None, Some(Owner::Backbone));
                        let xv = g.tape.constant(x.clone());
                        let scope = g.scope(&path);
                        let ctx = enc.block_context(stack, 0);
                        let y = match site {
                            Site::FfnStart | Site::FfnEnd => conformer::ffn_forward(&mut g, &scope, xv, 0.5).unwrap(),
                            Site::Mhsa => conformer::mhsa_forward(
                                &mut g,
                                &scope,
                                xv,
                                enc.num_heads,
                                ctx.mhsa,
                                enc.relative_position(stack),
                            )
                            .unwrap(),
                            _ => conformer::conv_forward(
                                &mut g,
                                &scope,
                                xv,
                                enc.conv_kernel,
                                enc.conv_norm_groups,
                                ctx.conv,
                            )
                            .unwrap(),
                        };
                        let l = weighted_sum(&mut g.tape, y);
                        let lv = leaves(&g);
                        (g.into_tape(), l, lv)
                    },
                )
            });
        }
    }
}

fn encoder_loss(
    cfg: &ModelConfig,
    x: &Tensor<f64>,
    targets: &[usize],
    backbone: &ParamSet<f64>,
    domain: Option<&DomainEntry<f64>>,
    owner: Owner,
) -> (Tape<f64>, Var, Vec<(String, Var)>) {
    let mut g = Graph::new(backbone, domain, Some(owner));
    let out = encode(&mut g, &cfg.encoder, x, true).unwrap();
    let l = transducer_loss(&mut g, &cfg.decoder, Stack::DecoderNonCausal, out.noncausal.unwrap(), targets).unwrap();
    let c = transducer_loss(&mut g, &cfg.decoder, Stack::DecoderCausal, out.causal, targets).unwrap();
    let l = g.tape.add(l, c).unwrap();
    let lv = leaves(&g);
    (g.into_tape(), l, lv)
}

pub fn two_block_encoder_and_decoder_gradients() {
    let cfg = tiny_config();
    over_instances("encoder+decoders", |rng| {
        let backbone = random_params(rng, &cfg.backbone_layout());
        let frames = rng.random_range(1..5);
        let x = rand_tensor(rng, &[frames, cfg.encoder.feature_dim], 1.0);
        let targets: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..3)).collect();
        check_params(&backbone, |_| true, |set, _| encoder_loss(&cfg, &x, &targets, set, None, Owner::Backbone))
    });
}

pub fn routed_domain_gradients() {
    let cfg = tiny_config();
    let plan = DomainPlan {
        domain: "d".into(),
        overrides: [
            ModulePath::module(Stack::Causal, 0, Site::Conv),
            ModulePath::decoder(Stack::DecoderNonCausal, Site::Joint),
        ]
        .into(),
        adapters: vec![
            AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: [ModulePath::module(Stack::Causal, 0, Site::FfnStart)].into(),
                bottleneck: 2,
                activation: Activation::Swish,
            },
            AdapterSpec {
                mode: AdapterMode::Sequential,
                sites: [
                    ModulePath::module(Stack::NonCausal, 0, Site::FfnEnd),
                    ModulePath::module(Stack::NonCausal, 0, Site::Mhsa),
                ]
                .into(),
                bottleneck: 1,
                activation: Activation::Swish,
            },
        ],
        seed: 3,
    };
    over_instances("domain", |rng| {
        let backbone = random_params(rng, &cfg.backbone_layout());
        let mut model = MdaModel::new(cfg.clone(), "base", backbone.clone()).unwrap();
        let entry = DomainEntry {
            id: DomainId(1),
            plan: plan.clone(),
            params: random_params(rng, &domain_layout(&cfg, &plan)),
        };
        model.insert_domain(entry.clone()).unwrap();
        let frames = rng.random_range(1..5);
        let x = rand_tensor(rng, &[frames, cfg.encoder.feature_dim], 1.0);
        let targets: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(0..3)).collect();
        check_params(
            &entry.params,
            |_| true,
            |set, _| {
                let e = DomainEntry { params: set.clone(), ..entry.clone() };
                encoder_loss(&cfg, &x, &targets, &backbone, Some(&e), Owner::Domain(DomainId(1)))
            },
        )
    });
}
