//! Finite-difference suites over the operations, the relation module, the
//! losses and the complete training objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, ConvStage, NUM_PARTS};
use crate::config::CatMode;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{Graph, Var};
use crate::losses::{cat_per_triplet, scaled_softmax_loss, ComponentWeights, LossConfig, ScaleMode};
use crate::mask::BinaryMask;
use crate::model::{ModelConfig, PramModel};
use crate::param::{ParamId, ParamStore};
use crate::pram::{RelationAttention, NUM_RELATIONS};
use crate::tensor::Tensor;
use crate::trainer::{build_loss, LossSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Pram,
    Losses,
    Full,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "pram" => Ok(Scope::Pram),
            "losses" => Ok(Scope::Losses),
            "full" => Ok(Scope::Full),
            other => Err(Error::InvalidArgument(format!(
                "scope `{other}` (expected ops, pram, losses or full)"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Pram => "pram",
            Scope::Losses => "losses",
            Scope::Full => "full",
        })
    }
}

/// One named case and its per-parameter results.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case: String,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug)]
pub struct ScopeReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_error())
            .fold(0.0, f64::max)
    }

    /// `case  parameter  coords  max_rel_error  status` rows.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:<22} {:>7} {:>14}  status\n",
            "case", "parameter", "coords", "max_rel_error"
        );
        for c in &self.cases {
            for e in &c.report.entries {
                let status = if e.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
                out.push_str(&format!(
                    "{:<28} {:<22} {:>7} {:>14.3e}  {status}\n",
                    c.case, e.name, e.coords_checked, e.max_rel_error
                ));
            }
        }
        out
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    name: String,
    store: ParamStore<f64>,
    loss: LossFn,
    max_coords: Option<usize>,
    epsilon: Option<f64>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `Σ out ⊙ r` with fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(out).numel();
    let r = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.mul_const(out, r)?;
    Ok(g.sum(w))
}

fn case(
    name: impl Into<String>,
    store: ParamStore<f64>,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        store,
        loss: Box::new(loss),
        max_coords: None,
        epsilon: None,
    }
}

fn with_inputs(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            store
                .add(format!("x{i}"), random_tensor(rng, s, 1.0))
                .expect("fresh names")
        })
        .collect();
    (store, ids)
}

fn ops_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    for (n, c, h, k, stride, pad) in [(1, 1, 5, 3, 1, 0), (2, 2, 6, 3, 2, 1), (1, 3, 7, 5, 1, 2)] {
        let (store, ids) = with_inputs(rng, &[&[n, c, h, h], &[4, c, k, k], &[4]]);
        cases.push(case(format!("conv2d {n}x{c}x{h}x{h} k{k} s{stride} p{pad}"), store, move |g, s| {
            let x = g.param(s, ids[0]);
            let w = g.param(s, ids[1]);
            let b = g.param(s, ids[2]);
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            probe(g, y, 1)
        }));
    }
    for shape in [vec![2, 4, 3, 3], vec![3, 6], vec![1, 2, 1, 5]] {
        let (store, ids) = with_inputs(rng, &[&shape]);
        cases.push(case(format!("mfm {shape:?}"), store, move |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.mfm(x)?;
            probe(g, y, 2)
        }));
    }
    for (shape, win, stride) in [([1, 1, 4, 4], 2, 2), ([2, 3, 5, 5], 2, 2), ([1, 2, 6, 6], 3, 3)] {
        let (store, ids) = with_inputs(rng, &[&shape]);
        cases.push(case(format!("max_pool2d {shape:?} w{win}"), store, move |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.max_pool2d(x, win, stride)?;
            probe(g, y, 3)
        }));
    }
    for (n, d, e) in [(1, 3, 2), (4, 5, 3), (2, 8, 8)] {
        let (store, ids) = with_inputs(rng, &[&[n, d], &[d, e], &[e]]);
        cases.push(case(format!("linear {n}x{d}->{e}"), store, move |g, s| {
            let x = g.param(s, ids[0]);
            let w = g.param(s, ids[1]);
            let b = g.param(s, ids[2]);
            let y = g.linear(x, w, Some(b))?;
            probe(g, y, 4)
        }));
    }
    for (n, d) in [(1, 3), (3, 4), (5, 7)] {
        let (store, ids) = with_inputs(rng, &[&[n, d], &[n, d]]);
        cases.push(case(format!("row_cosine {n}x{d}"), store, move |g, s| {
            let a = g.param(s, ids[0]);
            let b = g.param(s, ids[1]);
            let y = g.row_cosine(a, b)?;
            probe(g, y, 5)
        }));
        let (store, ids) = with_inputs(rng, &[&[n, d]]);
        cases.push(case(format!("l2_normalize {n}x{d}"), store, move |g, s| {
            let a = g.param(s, ids[0]);
            let y = g.l2_normalize(a)?;
            probe(g, y, 6)
        }));
    }
    for n in [1, 3, 6] {
        let mut store = ParamStore::new();
        // keep the hinge active and away from its kink
        let sp = store
            .add("sp", Tensor::from_fn(&[n], |_| rng.random_range(0.0..0.5)))
            .expect("fresh");
        let sn = store
            .add("sn", Tensor::from_fn(&[n], |_| rng.random_range(0.3..0.9)))
            .expect("fresh");
        cases.push(case(format!("conditional_triplet n{n}"), store, move |g, s| {
            let p = g.param(s, sp);
            let q = g.param(s, sn);
            let y = g.conditional_triplet(p, q, 0.55)?;
            probe(g, y, 7)
        }));
    }
    for (n, e) in [(1, 2), (2, 3), (3, 5)] {
        let (store, ids) = with_inputs(rng, &[&[NUM_RELATIONS * n, e], &[NUM_RELATIONS]]);
        cases.push(case(format!("fuse n{n} e{e}"), store, move |g, s| {
            let r = g.param(s, ids[0]);
            let a = g.param(s, ids[1]);
            let y = g.fuse(r, a)?;
            probe(g, y, 8)
        }));
    }
    for (n, k) in [(1, 2), (3, 4), (5, 3)] {
        let (store, ids) = with_inputs(rng, &[&[n, k]]);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
        cases.push(case(format!("softmax_cross_entropy {n}x{k}"), store, move |g, s| {
            let z = g.param(s, ids[0]);
            let y = g.softmax_cross_entropy(z, &labels)?;
            probe(g, y, 9)
        }));
    }
    for (n, d) in [(2, 3), (4, 2), (5, 4)] {
        let (store, ids) = with_inputs(rng, &[&[n, d], &[n, d]]);
        cases.push(case(format!("rows/cols/scale {n}x{d}"), store, move |g, s| {
            let a = g.param(s, ids[0]);
            let b = g.param(s, ids[1]);
            let top = g.slice_rows(a, 1, n - 1)?;
            let picked = g.gather_rows(b, &[n - 1, 0, 0])?;
            let rows = g.concat_rows(&[top, picked])?;
            let cols = g.concat_cols(&[a, b])?;
            let flat = g.flatten(cols)?;
            let sum_c = probe(g, flat, 10)?;
            let scaled = g.scale(rows, 1.7);
            let sum_r = probe(g, scaled, 11)?;
            let both = g.add(sum_c, sum_r)?;
            let m = g.mean(both);
            Ok(m)
        }));
    }
    cases
}

fn pram_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (n, h, e) in [(1, 3, 4), (2, 4, 6), (3, 2, 5)] {
        let mut store = ParamStore::new();
        let ra = RelationAttention::new(&mut store, h, e, rng)?;
        for (_, p) in store.clone().iter() {
            if p.name == "pram.alpha" {
                let id = store.id(&p.name).expect("listed");
                store.get_mut(id).tensor = random_tensor(rng, &[NUM_RELATIONS], 1.0);
            }
        }
        let parts: Vec<ParamId> = (0..NUM_PARTS)
            .map(|p| store.add(format!("part{p}"), random_tensor(rng, &[n, h], 1.0)))
            .collect::<Result<_>>()?;
        cases.push(case(format!("pram n{n} h{h} e{e}"), store, move |g, s| {
            let xs: [Var; NUM_PARTS] = std::array::from_fn(|p| g.param(s, parts[p]));
            let y = ra.forward(g, s, &xs)?;
            probe(g, y, 12)
        }));
    }
    Ok(cases)
}

fn random_weights(rng: &mut ChaCha8Rng, b: usize) -> Vec<ComponentWeights> {
    (0..b)
        .map(|_| ComponentWeights {
            lambda: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        })
        .collect()
}

fn losses_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (b, d) in [(1, 3), (2, 4), (3, 6)] {
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for role in ["a", "p", "n"] {
            for p in 0..NUM_PARTS {
                ids.push(store.add(format!("{role}{p}"), random_tensor(rng, &[b, d], 1.0))?);
            }
        }
        let weights = random_weights(rng, b);
        cases.push(case(format!("cat b{b} d{d}"), store, move |g, s| {
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let a: [Var; NUM_PARTS] = std::array::from_fn(|p| v[p]);
            let p: [Var; NUM_PARTS] = std::array::from_fn(|p| v[NUM_PARTS + p]);
            let n: [Var; NUM_PARTS] = std::array::from_fn(|p| v[2 * NUM_PARTS + p]);
            let per = cat_per_triplet(g, &a, &p, &n, &weights, 0.3)?;
            Ok(g.mean(per))
        }));
    }
    for mode in [ScaleMode::LossScale, ScaleMode::FeatureScale] {
        for (n, e, k) in [(2, 3, 2), (4, 5, 3), (6, 4, 4)] {
            let mut store = ParamStore::new();
            let emb = store.add("embedding", random_tensor(rng, &[n, e], 1.0))?;
            let w = store.add("classifier", random_tensor(rng, &[e, k], 0.3))?;
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let cfg = LossConfig {
                scale_mode: mode,
                softmax_scale: 2.0,
                ..LossConfig::default()
            };
            cases.push(case(format!("softmax {mode} {n}x{e} k{k}"), store, move |g, s| {
                let x = g.param(s, emb);
                scaled_softmax_loss(g, s, x, &labels, w, &cfg)
            }));
        }
    }
    Ok(cases)
}

/// Small network configuration used by the full-objective check.
pub fn gradcheck_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: 1,
            face_size: (16, 16),
            part_size: (8, 8),
            stages: vec![
                ConvStage { out_channels: 4, kernel: 3, stride: 1, pool: 2 },
                ConvStage { out_channels: 4, kernel: 3, stride: 1, pool: 2 },
            ],
            head_dim: 4,
            freeze_below: 0,
        },
        embed_dim: 6,
        pram_on: true,
        num_classes,
    }
}

fn full_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let b = 3;
    let classes = 3;
    let mut cases = Vec::new();
    for mode in [ScaleMode::LossScale, ScaleMode::FeatureScale] {
        let mut store = ParamStore::new();
        let model = PramModel::new(gradcheck_model_config(classes), &mut store, rng)?;
        let faces: Vec<(Tensor<f64>, Vec<BinaryMask>)> = (0..3 * b)
            .map(|_| {
                let img = Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0));
                let masks = (0..NUM_PARTS)
                    .map(|_| {
                        let (r0, c0) = (rng.random_range(0..12), rng.random_range(0..12));
                        BinaryMask::from_fn(16, 16, |r, c| {
                            (r0..r0 + 4).contains(&r) && (c0..c0 + 4).contains(&c)
                        })
                    })
                    .collect();
                (img, masks)
            })
            .collect();
        let inputs = model.prepare_inputs(&faces)?;
        let weights = random_weights(rng, b);
        let labels: Vec<usize> = (0..3 * b).map(|i| [0, 0, 1, 0, 0, 1, 1, 2, 2][i]).collect();
        let loss = LossConfig {
            scale_mode: mode,
            ..LossConfig::default()
        };
        let mut c = case(format!("full objective {mode}"), store, move |g, s| {
            let spec = LossSpec {
                cat_mode: CatMode::Cat,
                loss: &loss,
                labels: &labels,
                weights: &weights,
                hard_candidates: None,
            };
            Ok(build_loss(g, &model, s, &inputs, &spec)?.total)
        });
        // the trunk's max operations have kinks; keep the stencil narrow
        c.epsilon = Some(1e-6);
        cases.push(c);
    }
    Ok(cases)
}

/// Runs every case of `scope`; failures are reported, not returned as errors.
pub fn run_scope(scope: Scope, tolerance: f64, seed: u64) -> Result<ScopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = match scope {
        Scope::Ops => ops_cases(&mut rng),
        Scope::Pram => pram_cases(&mut rng)?,
        Scope::Losses => losses_cases(&mut rng)?,
        Scope::Full => full_cases(&mut rng)?,
    };
    let mut out = Vec::with_capacity(cases.len());
    for mut c in cases {
        let defaults = GradcheckConfig::default();
        let cfg = GradcheckConfig {
            tolerance,
            max_coords: c.max_coords,
            seed,
            epsilon: c.epsilon.unwrap_or(defaults.epsilon),
        };
        let report = gradcheck(&mut c.store, &c.loss, &cfg)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", c.name)))?;
        out.push(CaseReport { case: c.name, report });
    }
    Ok(ScopeReport {
        scope,
        tolerance,
        cases: out,
    })
}
