//! Finite-difference gradient suite and single-example introspection.

use serde::Serialize;

use crate::ama::{aggregate_loss, sigmas, AmaConfig, M, TASK_NAMES};
use crate::data::{gen_synthetic, MultimodalExample, SyntheticConfig};
use crate::encoders::{ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::Result;
use crate::mcl::{
    gcl_loss, wra_loss, BioLabel, CrfParams, FeatureSource, IpotConfig, MclConfig, TaggerOptions, TaggerParams,
};
use crate::nn::{Forward, Init};
use crate::numerics::gradcheck::{GroupSummary, Mismatch};
use crate::numerics::{grad_check, GradCheckConfig, ParamStore, Rng, Tape, Tensor, Var};
use crate::paf::{PafConfig, PafParams};
use crate::trainer::{Model, ModelConfig, Switches};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for compositions through softmax, normalization or the CRF.
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCheck {
    pub module: &'static str,
    pub name: String,
    pub tol: f64,
    pub passed: bool,
    pub max_error: f64,
    pub groups: Vec<GroupSummary>,
    pub failures: Vec<Mismatch>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleSummary {
    pub module: &'static str,
    pub checks: usize,
    pub groups: usize,
    pub coordinates: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub passed: bool,
    pub modules: Vec<ModuleSummary>,
    pub checks: Vec<SuiteCheck>,
}

fn random(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, std)).collect())
}

/// `Σ y ⊙ w` for a fixed random `w`, so each output gets its own upstream gradient.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(&mut Rng::new(seed), tape.shape(y), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Move every parameter off its initialization so zero tables and unit
/// gains are checked at a generic point.
fn jitter(store: &mut ParamStore, rng: &mut Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.normal(0.0, std);
        }
    }
}

struct Suite {
    seed: u64,
    rng: Rng,
    checks: Vec<SuiteCheck>,
}

impl Suite {
    fn run<F>(&mut self, module: &'static str, name: &str, tol: f64, store: &mut ParamStore, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let cfg = GradCheckConfig {
            tol,
            seed: self.seed,
            ..GradCheckConfig::default()
        };
        let report = grad_check(f, store, &cfg)?;
        self.checks.push(SuiteCheck {
            module,
            name: name.to_string(),
            tol,
            passed: report.passed(),
            max_error: report.max_error(),
            groups: report.groups,
            failures: report.failures,
        });
        Ok(())
    }

    fn unary(&mut self, name: &str, shape: &[usize], op: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<()> {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut self.rng, shape, 1.0), true);
        let seed = self.seed;
        self.run("numerics", name, PRIMITIVE_TOL, &mut store, |t, s| {
            let v = t.param(s, x);
            let y = op(t, v)?;
            readout(t, y, seed)
        })
    }

    fn binary(
        &mut self,
        name: &str,
        a: &[usize],
        b: &[usize],
        op: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    ) -> Result<()> {
        let mut store = ParamStore::new();
        let x = store.add("a", random(&mut self.rng, a, 1.0), true);
        let y = store.add("b", random(&mut self.rng, b, 1.0), true);
        let seed = self.seed;
        self.run("numerics", name, PRIMITIVE_TOL, &mut store, |t, s| {
            let (va, vb) = (t.param(s, x), t.param(s, y));
            let out = op(t, va, vb)?;
            readout(t, out, seed)
        })
    }

    fn primitives(&mut self) -> Result<()> {
        self.binary("matmul", &[3, 4], &[4, 5], |t, a, b| t.matmul(a, b))?;
        self.binary("matmul_bt", &[3, 4], &[5, 4], |t, a, b| t.matmul_bt(a, b))?;
        self.unary("transpose", &[3, 5], |t, x| Ok(t.transpose(x)))?;
        self.binary("add", &[4, 5], &[4, 5], |t, a, b| t.add(a, b))?;
        self.binary("sub", &[4, 5], &[4, 5], |t, a, b| t.sub(a, b))?;
        self.binary("mul", &[4, 5], &[4, 5], |t, a, b| t.mul(a, b))?;
        self.binary("add_row", &[4, 6], &[6], |t, a, b| t.add_row(a, b))?;
        self.binary("mul_row", &[4, 6], &[6], |t, a, b| t.mul_row(a, b))?;
        self.unary("affine", &[4, 5], |t, x| Ok(t.affine(x, -1.5, 0.25)))?;
        self.unary("softmax_rows", &[4, 6], |t, x| Ok(t.softmax_rows(x)))?;
        self.unary("gelu", &[4, 6], |t, x| Ok(t.gelu(x)))?;
        self.unary("sigmoid", &[4, 6], |t, x| Ok(t.sigmoid(x)))?;
        self.unary("exp", &[4, 6], |t, x| Ok(t.exp(x)))?;
        self.unary("l2_normalize_rows", &[4, 6], |t, x| Ok(t.l2_normalize_rows(x)))?;
        let seed = self.seed;
        self.unary("dropout", &[4, 6], move |t, x| {
            t.dropout(x, 0.3, true, &mut Rng::new(seed))
        })?;
        self.unary("slice_cols", &[4, 6], |t, x| t.slice_cols(x, 1, 3))?;
        self.unary("slice_rows", &[5, 3], |t, x| t.slice_rows(x, 1, 3))?;
        self.binary("concat_cols", &[3, 2], &[3, 4], |t, a, b| t.concat_cols(&[a, b]))?;
        self.binary("concat_rows", &[2, 4], &[3, 4], |t, a, b| t.concat_rows(&[a, b]))?;
        self.unary("gather_rows", &[6, 3], |t, x| t.gather_rows(x, &[4, 0, 4, 2]))?;
        self.unary("pick", &[4, 6], |t, x| t.pick(x, &[5, 0, 2, 2]))?;
        self.unary("sum", &[4, 6], |t, x| Ok(t.sum(x)))?;
        self.unary("mean", &[4, 6], |t, x| Ok(t.mean(x)))?;
        self.binary("stack", &[1], &[1], |t, a, b| t.stack(&[a, b, a]))?;
        self.unary("cross_entropy", &[5, 7], |t, x| t.cross_entropy(x, &[0, 6, 3, 3, 1]))?;

        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut self.rng, &[4, 6], 1.0), true);
        let g = store.add("gamma", random(&mut self.rng, &[6], 1.0), false);
        let b = store.add("beta", random(&mut self.rng, &[6], 1.0), false);
        self.run("numerics", "layer_norm", PRIMITIVE_TOL, &mut store, |t, s| {
            let (vx, vg, vb) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let y = t.layer_norm(vx, vg, vb, 1e-5)?;
            readout(t, y, seed)
        })
    }

    fn encoders(&mut self) -> Result<()> {
        let seed = self.seed;
        let text_cfg = TextEncoderConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            max_len: 6,
            dropout_p: 0.1,
        };
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut self.rng,
            },
            &text_cfg,
        )?;
        jitter(&mut store, &mut self.rng, 0.1);
        let tokens = [3, 10, 0, 3, 7];
        self.run("encoders", "text encoder", COMPOSITE_TOL, &mut store, |t, s| {
            Forward::on_tape(t, s, |f| {
                let y = enc.forward(f, &tokens)?;
                readout(&mut f.tape, y, seed)
            })
        })?;

        let image_cfg = ImageEncoderConfig {
            image_h: 4,
            image_w: 6,
            channels: 2,
            patch_size: 2,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            dropout_p: 0.1,
        };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut self.rng,
            },
            &image_cfg,
        )?;
        jitter(&mut store, &mut self.rng, 0.1);
        let img = crate::encoders::PatchGrid::new(4, 6, 2, (0..48).map(|_| self.rng.uniform()).collect())?;
        self.run("encoders", "image encoder", COMPOSITE_TOL, &mut store, |t, s| {
            Forward::on_tape(t, s, |f| {
                let y = enc.forward(f, &img)?;
                readout(&mut f.tape, y, seed)
            })
        })
    }

    fn paf(&mut self) -> Result<()> {
        let seed = self.seed;
        for self_bias in [true, false] {
            let cfg = PafConfig {
                d_hidden: 8,
                n_heads: 2,
                dropout_p: 0.1,
                l_max: 6,
                self_bias,
            };
            let mut store = ParamStore::new();
            let paf = PafParams::new(
                &mut Init {
                    store: &mut store,
                    rng: &mut self.rng,
                },
                &cfg,
                6,
            )?;
            let text = store.add("input.text", random(&mut self.rng, &[4, 6], 1.0), false);
            let image = store.add("input.image", random(&mut self.rng, &[5, 6], 1.0), false);
            jitter(&mut store, &mut self.rng, 0.1);
            let name = if self_bias {
                "fusion (with P)"
            } else {
                "fusion (without P)"
            };
            self.run("paf", name, COMPOSITE_TOL, &mut store, |t, s| {
                Forward::on_tape(t, s, |f| {
                    let (vt, vi) = (f.p(text), f.p(image));
                    let out = paf.forward(f, vt, vi, true)?;
                    readout(&mut f.tape, out.fused, seed)
                })
            })?;
        }
        Ok(())
    }

    fn mcl(&mut self) -> Result<()> {
        let mut store = ParamStore::new();
        let x = store.add("text", random(&mut self.rng, &[4, 8], 1.0), true);
        let v = store.add("image", random(&mut self.rng, &[4, 8], 1.0), true);
        self.run("mcl", "global contrastive loss", COMPOSITE_TOL, &mut store, |t, s| {
            let (vx, vv) = (t.param(s, x), t.param(s, v));
            gcl_loss(t, vx, vv, 0.07)
        })?;

        let mut store = ParamStore::new();
        let x = store.add("tokens", random(&mut self.rng, &[5, 6], 1.0), true);
        let p = store.add("patches", random(&mut self.rng, &[4, 6], 1.0), true);
        let ipot = IpotConfig::default();
        self.run("mcl", "word-region alignment", COMPOSITE_TOL, &mut store, |t, s| {
            let (vx, vp) = (t.param(s, x), t.param(s, p));
            Ok(wra_loss(t, vx, vp, &ipot)?.0)
        })?;

        let mut store = ParamStore::new();
        let crf = CrfParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut self.rng,
            },
            "crf",
        );
        let e = store.add("emissions", random(&mut self.rng, &[4, BioLabel::COUNT], 1.0), true);
        jitter(&mut store, &mut self.rng, 0.5);
        let labels = [BioLabel::BPos, BioLabel::IPos, BioLabel::O, BioLabel::BNeg];
        self.run("mcl", "crf likelihood", COMPOSITE_TOL, &mut store, |t, s| {
            Forward::on_tape(t, s, |f| {
                let ve = f.p(e);
                crf.nll(f, ve, &labels)
            })
        })?;

        let mut store = ParamStore::new();
        let tagger = TaggerParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut self.rng,
            },
            6,
            8,
        );
        let h_paf = store.add("input.fused", random(&mut self.rng, &[4, 8], 1.0), true);
        let h_text = store.add("input.text", random(&mut self.rng, &[4, 6], 1.0), true);
        jitter(&mut store, &mut self.rng, 0.2);
        self.run("mcl", "dual-crf tagger", COMPOSITE_TOL, &mut store, |t, s| {
            Forward::on_tape(t, s, |f| {
                let (hp, ht) = (f.p(h_paf), f.p(h_text));
                let out = tagger.forward(f, hp, ht, Some(&labels), TaggerOptions::default())?;
                let (a, b) = (out.l_crf.expect("labels"), out.l_cls.expect("labels"));
                f.tape.add(a, b)
            })
        })
    }

    fn ama(&mut self) -> Result<()> {
        let mut store = ParamStore::new();
        let rho = store.add("ama.rho", random(&mut self.rng, &[M], 0.5), false);
        let losses: Vec<_> = (0..M)
            .map(|i| store.add(TASK_NAMES[i], Tensor::scalar(0.1 + 2.0 * self.rng.uniform()), false))
            .collect();
        let pi: [f64; M] = std::array::from_fn(|_| self.rng.normal(0.0, 1.0));
        let cfg = AmaConfig::default();
        let w = crate::ama::priority_weights(&pi, cfg.alpha, cfg.tau)?;
        self.run("ama", "adaptive aggregation", COMPOSITE_TOL, &mut store, |t, s| {
            let ls = std::array::from_fn(|i| t.param(s, losses[i]));
            let r = t.param(s, rho);
            aggregate_loss(t, ls, [true; M], r, &w)
        })
    }

    fn end_to_end(&mut self) -> Result<()> {
        for (name, source) in [
            ("total loss", FeatureSource::Encoder),
            ("total loss (fused features)", FeatureSource::Paf),
        ] {
            let cfg = tiny_model_config(source);
            let data = tiny_corpus(&cfg, 3, self.seed)?;
            let mut model = Model::new(&cfg, Switches::default(), self.seed)?;
            jitter(&mut model.params, &mut self.rng, 0.05);
            model.ama.pi = std::array::from_fn(|_| self.rng.normal(0.0, 1.0));
            let weights = model.ama.weights()?;
            let batch: Vec<&MultimodalExample> = data.iter().collect();
            let net = &model.net;
            self.run("trainer", name, COMPOSITE_TOL, &mut model.params, |t, s| {
                Forward::on_tape(t, s, |f| {
                    let trace = net.forward_batch(f, &batch)?;
                    net.total_loss(f, &trace, &weights)
                })
            })?;
        }
        Ok(())
    }
}

/// Smallest configuration that still runs every component.
pub fn tiny_model_config(source: FeatureSource) -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            vocab_size: 48,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 12,
            max_len: 8,
            dropout_p: 0.1,
        },
        image: ImageEncoderConfig {
            image_h: 4,
            image_w: 8,
            channels: 3,
            patch_size: 2,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 12,
            dropout_p: 0.1,
        },
        paf: PafConfig {
            d_hidden: 8,
            n_heads: 2,
            dropout_p: 0.1,
            l_max: 9,
            self_bias: true,
        },
        mcl: MclConfig {
            gcl_source: source,
            wra_source: source,
            ..MclConfig::default()
        },
        ama: AmaConfig::default(),
    }
}

pub fn tiny_corpus(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<MultimodalExample>> {
    gen_synthetic(&SyntheticConfig::for_encoders(&cfg.text, &cfg.image, n, seed))
}

/// Every finite-difference check, grouped by module.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let mut suite = Suite {
        seed,
        rng: Rng::new(seed),
        checks: Vec::new(),
    };
    suite.primitives()?;
    suite.encoders()?;
    suite.paf()?;
    suite.mcl()?;
    suite.ama()?;
    suite.end_to_end()?;

    let mut modules: Vec<ModuleSummary> = Vec::new();
    for c in &suite.checks {
        let coords: usize = c.groups.iter().map(|g| g.checked).sum();
        match modules.iter_mut().find(|m| m.module == c.module) {
            Some(m) => {
                m.checks += 1;
                m.groups += c.groups.len();
                m.coordinates += coords;
                m.max_error = m.max_error.max(c.max_error);
                m.passed &= c.passed;
            }
            None => modules.push(ModuleSummary {
                module: c.module,
                checks: 1,
                groups: c.groups.len(),
                coordinates: coords,
                max_error: c.max_error,
                passed: c.passed,
            }),
        }
    }
    Ok(SuiteReport {
        seed,
        passed: suite.checks.iter().all(|c| c.passed),
        modules,
        checks: suite.checks,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionDump {
    pub stage: String,
    /// One probability row per query.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanDump {
    pub plan: Vec<Vec<f64>>,
    pub matching: Vec<usize>,
    pub objective: f64,
    pub marginal_violation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Inspection {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub transport: Option<PlanDump>,
    pub attention: Vec<AttentionDump>,
    pub gate: Option<Vec<f64>>,
    pub task_names: [&'static str; M],
    pub weights: [f64; M],
    pub sigmas: [f64; M],
}

/// Eval-mode internals for one example.
pub fn inspect(model: &Model, ex: &MultimodalExample, index: usize) -> Result<Inspection> {
    let mut f = Forward::eval(&model.params);
    let trace = model.net.forward_example(&mut f, ex, true)?;
    let rows = |tape: &Tape, v: Var| tape.value(v).to_rows();
    let mut attention = Vec::new();
    for (i, s) in trace.paf.stages.iter().enumerate() {
        attention.push(AttentionDump {
            stage: format!("stage{}.self", i + 1),
            rows: rows(&f.tape, s.self_probs),
        });
        attention.push(AttentionDump {
            stage: format!("stage{}.cross", i + 1),
            rows: rows(&f.tape, s.cross_probs),
        });
    }
    let mut gate = None;
    if let Some(c) = &trace.paf.cross {
        for (h, &p) in c.probs.iter().enumerate() {
            attention.push(AttentionDump {
                stage: format!("stage3.head{h}"),
                rows: rows(&f.tape, p),
            });
        }
        gate = Some(f.tape.value(c.gate).data().to_vec());
    }
    let transport = trace.wra.as_ref().map(|(_, plan)| PlanDump {
        plan: plan.plan.to_rows(),
        matching: plan.matching.clone(),
        objective: plan.objective,
        marginal_violation: plan.marginal_violation(),
    });
    Ok(Inspection {
        index,
        tokens: ex.tokens.clone(),
        gold: ex.labels.iter().map(|l| l.as_str().to_string()).collect(),
        predicted: trace.tagger.decoded.iter().map(|l| l.as_str().to_string()).collect(),
        transport,
        attention,
        gate,
        task_names: TASK_NAMES,
        weights: model.ama.weights()?,
        sigmas: sigmas(model.params.get(model.ama.rho)),
    })
}
