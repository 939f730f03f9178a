//! Training loop: triplet sampling, forward pass, softmax + triplet loss,
//! backward pass and SGD update. Also embedding of whole splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::NUM_PARTS;
use crate::config::{CatMode, Mining, TrainConfig};
use crate::dataset::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::eval::{Entry, Protocol};
use crate::graph::{Graph, Var};
use crate::losses::{cat_per_triplet, scaled_softmax_loss, total_loss, ComponentWeights, LossConfig};
use crate::model::{BatchInputs, PramModel};
use crate::optim::sgd_step;
use crate::param::ParamStore;
use crate::sampler::{assemble_batch, sample_triplets, CropMode, NegativeDomain, TrainingBatch};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub l_softmax: f64,
    pub l_cat: f64,
    pub l_total: f64,
    /// Mean mask IoU over the batch's triplets and components.
    pub mean_lambda: f64,
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub softmax: Var,
    /// Mean per-triplet loss; `None` when the triplet term is off.
    pub cat: Option<Var>,
    pub total: Var,
}

/// What the loss sees of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossSpec<'a> {
    pub cat_mode: CatMode,
    pub loss: &'a LossConfig,
    /// Class index of every row (`3·B`).
    pub labels: &'a [usize],
    /// Mask λ per triplet.
    pub weights: &'a [ComponentWeights],
    /// Allowed negative rows (indices into `0..B`) per triplet for
    /// batch-hard selection; `None` keeps each triplet's own negative.
    pub hard_candidates: Option<&'a [Vec<usize>]>,
}

fn value_f64<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// Builds `L_softmax (+ L_triplet)` for `3·B` rows ordered anchors, positives,
/// negatives.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &PramModel,
    store: &ParamStore<T>,
    inputs: &BatchInputs<T>,
    spec: &LossSpec<'_>,
) -> Result<LossTerms> {
    let n = inputs.len();
    let b = spec.weights.len();
    if n != 3 * b || spec.labels.len() != n {
        return Err(Error::shape(
            "build_loss",
            format!("{n} rows, {} labels for {b} triplets", spec.labels.len()),
        ));
    }
    let out = model.forward(g, store, inputs)?;
    let softmax = scaled_softmax_loss(g, store, out.embedding, spec.labels, model.classifier(), spec.loss)?;
    let weights: Vec<ComponentWeights> = match spec.cat_mode {
        CatMode::Off => return Ok(LossTerms { softmax, cat: None, total: softmax }),
        CatMode::PlainC => vec![ComponentWeights::ones(); b],
        CatMode::Cat => spec.weights.to_vec(),
    };
    let mut split = [[out.parts[0]; NUM_PARTS]; 3];
    for (k, block) in split.iter_mut().enumerate() {
        for p in 0..NUM_PARTS {
            block[p] = g.slice_rows(out.parts[p], k * b, b)?;
        }
    }
    let [anchor, positive, mut negative] = split;
    if let Some(candidates) = spec.hard_candidates {
        let choice = hardest_negatives(g, anchor[0], negative[0], candidates)?;
        for v in negative.iter_mut() {
            *v = g.gather_rows(*v, &choice)?;
        }
    }
    let per = cat_per_triplet(g, &anchor, &positive, &negative, &weights, spec.loss.margin)?;
    let cat = g.mean(per);
    let total = total_loss(g, softmax, cat)?;
    Ok(LossTerms { softmax, cat: Some(cat), total })
}

/// For each anchor, the candidate row with the highest full-face cosine.
fn hardest_negatives<T: Scalar>(
    g: &Graph<T>,
    anchor: Var,
    negative: Var,
    candidates: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let d = g.shape(anchor)[1];
    let a = g.value(anchor).data();
    let n = g.value(negative).data();
    let cos = |i: usize, j: usize| -> f64 {
        let (u, v) = (&a[i * d..(i + 1) * d], &n[j * d..(j + 1) * d]);
        let dot: f64 = u.iter().zip(v).map(|(&x, &y)| (x * y).to_f64().unwrap_or(0.0)).sum();
        let nu: f64 = u.iter().map(|&x| (x * x).to_f64().unwrap_or(0.0)).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|&x| (x * x).to_f64().unwrap_or(0.0)).sum::<f64>().sqrt();
        dot / (nu * nv).max(f64::MIN_POSITIVE)
    };
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.iter()
                .copied()
                .fold(None, |best: Option<(usize, f64)>, j| {
                    let s = cos(i, j);
                    match best {
                        Some((_, bs)) if bs >= s => best,
                        _ => Some((j, s)),
                    }
                })
                .map(|(j, _)| j)
                .ok_or_else(|| Error::Dataset(format!("triplet {i} has no negative candidate")))
        })
        .collect()
}

pub struct Trainer {
    config: TrainConfig,
    model: PramModel,
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
    step: usize,
    /// Sorted training identities; class index = position.
    classes: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let classes = dataset.identities();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = PramModel::new(config.model_config(classes.len()), &mut store, &mut rng)?;
        Ok(Trainer {
            config,
            model,
            store,
            rng,
            step: 0,
            classes,
        })
    }

    pub(crate) fn from_parts(
        config: TrainConfig,
        model: PramModel,
        store: ParamStore<f32>,
        rng: ChaCha8Rng,
        step: usize,
        classes: Vec<usize>,
    ) -> Self {
        Trainer { config, model, store, rng, step, classes }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PramModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Changes the step budget, e.g. to extend a resumed run.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.config.steps = steps;
        self
    }

    fn labels(&self, identities: &[usize]) -> Result<Vec<usize>> {
        identities
            .iter()
            .map(|id| {
                self.classes.binary_search(id).map_err(|_| {
                    Error::Dataset(format!("identity {id} is not one of the training classes"))
                })
            })
            .collect()
    }

    /// Samples and crops the next training batch, advancing the rng.
    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<TrainingBatch> {
        let triplets = sample_triplets(
            dataset,
            self.config.batch_size,
            self.config.negative_domain,
            &mut self.rng,
        )?;
        assemble_batch(
            dataset,
            &triplets,
            &self.model,
            &self.config.crop_window(),
            CropMode::Train,
            &mut self.rng,
        )
    }

    fn hard_candidates(&self, dataset: &Dataset, batch: &TrainingBatch) -> Vec<Vec<usize>> {
        let b = batch.num_triplets();
        (0..b)
            .map(|i| {
                let anchor = dataset.get(batch.samples[i]);
                let positive = dataset.get(batch.samples[b + i]);
                let want = match self.config.negative_domain {
                    NegativeDomain::Anchor => anchor.domain,
                    NegativeDomain::Positive => positive.domain,
                };
                (0..b)
                    .filter(|&j| {
                        let n = dataset.get(batch.samples[2 * b + j]);
                        n.domain == want && n.identity != anchor.identity
                    })
                    .collect()
            })
            .collect()
    }

    fn evaluate(
        &self,
        g: &mut Graph<f32>,
        dataset: &Dataset,
        batch: &TrainingBatch,
    ) -> Result<(LossTerms, StepLog)> {
        let labels = self.labels(&batch.identities)?;
        let candidates = (self.config.mining == Mining::BatchHard)
            .then(|| self.hard_candidates(dataset, batch));
        let spec = LossSpec {
            cat_mode: self.config.cat_on,
            loss: &self.config.loss,
            labels: &labels,
            weights: &batch.weights,
            hard_candidates: candidates.as_deref(),
        };
        let terms = build_loss(g, &self.model, &self.store, &batch.inputs, &spec)?;
        let log = StepLog {
            step: self.step + 1,
            l_softmax: value_f64(g, terms.softmax),
            l_cat: terms.cat.map_or(0.0, |c| value_f64(g, c)),
            l_total: value_f64(g, terms.total),
            mean_lambda: batch.weights.iter().map(|w| w.mean()).sum::<f64>()
                / batch.weights.len() as f64,
        };
        if !log.l_total.is_finite() {
            let (node, op) = g.first_non_finite().unwrap_or((terms.total.index(), "loss"));
            return Err(Error::NonFinite { op, node });
        }
        Ok((terms, log))
    }

    /// Loss on `batch` without updating anything.
    pub fn loss_on(&self, dataset: &Dataset, batch: &TrainingBatch) -> Result<StepLog> {
        let mut g = Graph::new();
        Ok(self.evaluate(&mut g, dataset, batch)?.1)
    }

    /// One SGD update on `batch`.
    pub fn step_on(&mut self, dataset: &Dataset, batch: &TrainingBatch) -> Result<StepLog> {
        let mut g = Graph::new();
        let (terms, log) = self.evaluate(&mut g, dataset, batch)?;
        self.store.zero_grad();
        g.backward(terms.total, &mut self.store)?;
        drop(g);
        sgd_step(
            &mut self.store,
            self.config.lr as f32,
            self.config.weight_decay as f32,
        )?;
        self.step += 1;
        Ok(log)
    }

    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepLog> {
        let batch = self.next_batch(dataset)?;
        self.step_on(dataset, &batch)
    }

    /// Runs until `config.steps` steps are complete, calling `on_step` after each.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let log = self.train_step(dataset)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Centre-crop embeddings of every sample, in dataset order.
    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<Vec<EmbeddingRecord>> {
        embed_dataset(&self.model, &self.store, &self.config, dataset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub identity: usize,
    pub domain: Domain,
    pub embedding: Vec<f32>,
}

const EMBED_CHUNK: usize = 32;

pub fn embed_dataset(
    model: &PramModel,
    store: &ParamStore<f32>,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<Vec<EmbeddingRecord>> {
    let window = config.crop_window();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(EMBED_CHUNK) {
        let crops = chunk
            .iter()
            .map(|s| window.apply(&s.image, &s.masks, window.center_offset()))
            .collect::<Result<Vec<_>>>()?;
        let inputs = model.prepare_inputs(&crops)?;
        let e = model.embed(store, &inputs)?;
        let d = e.shape()[1];
        for (s, row) in chunk.iter().zip(e.data().chunks(d)) {
            out.push(EmbeddingRecord {
                sample_id: s.sample_id.clone(),
                identity: s.identity,
                domain: s.domain,
                embedding: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Gallery: the first VIS record of each identity. Probes: every NIR record.
pub fn protocol_from_embeddings(records: &[EmbeddingRecord]) -> Result<Protocol> {
    let mut gallery: BTreeMap<usize, Entry> = BTreeMap::new();
    let mut probes = Vec::new();
    for r in records {
        let entry = Entry {
            sample_id: r.sample_id.clone(),
            identity: r.identity,
            embedding: r.embedding.clone(),
        };
        match r.domain {
            Domain::Vis => {
                gallery.entry(r.identity).or_insert(entry);
            }
            Domain::Nir => probes.push(entry),
        }
    }
    Protocol::new(gallery.into_values().collect(), probes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "l_softmax", "l_cat", "l_total", "mean_lambda"])
        .map_err(|e| csv_error(path, e))?;
    for l in logs {
        w.write_record([
            l.step.to_string(),
            l.l_softmax.to_string(),
            l.l_cat.to_string(),
            l.l_total.to_string(),
            l.mean_lambda.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `sample_id,identity,domain,e0,…` with a header row.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let dim = records.first().map_or(0, |r| r.embedding.len());
    let mut header = vec!["sample_id".to_string(), "identity".into(), "domain".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![r.sample_id.clone(), r.identity.to_string(), r.domain.to_string()];
        row.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() < 4 {
            return Err(bad(format!("record {}: too few fields", line + 1)));
        }
        let embedding = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f32>().map_err(|e| bad(format!("record {}: {e}", line + 1))))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            sample_id: rec[0].to_string(),
            identity: rec[1]
                .parse()
                .map_err(|e| bad(format!("record {}: identity: {e}", line + 1)))?,
            domain: rec[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            embedding,
        });
    }
    Ok(out)
}

/// Casts network inputs, e.g. for a 64-bit gradient comparison.
pub fn cast_inputs<T: Scalar, U: Scalar>(inputs: &BatchInputs<T>) -> BatchInputs<U> {
    BatchInputs {
        faces: inputs.faces.cast(),
        parts: inputs.parts.cast(),
    }
}

/// Gradient of the summed triplet term alone with respect to every
/// trainable parameter, in store order.
pub fn triplet_gradients<T: Scalar>(
    model: &PramModel,
    store: &ParamStore<T>,
    inputs: &BatchInputs<T>,
    weights: &[ComponentWeights],
    margin: f64,
) -> Result<Vec<Option<Tensor<T>>>> {
    let b = weights.len();
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, inputs)?;
    let mut split = [[out.parts[0]; NUM_PARTS]; 3];
    for (k, block) in split.iter_mut().enumerate() {
        for p in 0..NUM_PARTS {
            block[p] = g.slice_rows(out.parts[p], k * b, b)?;
        }
    }
    let per = cat_per_triplet(&mut g, &split[0], &split[1], &split[2], weights, margin)?;
    let sum = g.sum(per);
    let mut grads = store.clone();
    grads.zero_grad();
    g.backward(sum, &mut grads)?;
    Ok(grads.iter().map(|(_, p)| p.grad.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, GenConfig, Perturbation, TRAIN_SPLIT};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.batch_size = 4;
        c.steps = 3;
        c.embed_dim = 16;
        c.head_dim = 8;
        c.crop_size = 128;
        c.part_size = 32;
        c.conv_stages = crate::config::parse_stages("4:5:4:2,8:3:1:2").unwrap();
        c
    }

    fn data() -> Dataset {
        let g = GenConfig {
            num_ids: 4,
            test_ids: 0,
            per_id: 2,
            seed: 1,
            level: Perturbation::Mild,
        };
        generate_split(&g, TRAIN_SPLIT).unwrap()
    }

    #[test]
    fn seeded_runs_are_identical() {
        let ds = data();
        let run = || {
            let mut t = Trainer::new(tiny_train_config(), &ds).unwrap();
            t.train(&ds, |_| {}).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.l_total.is_finite() && l.l_cat >= 0.0));
        assert_eq!(a[2].step, 3);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_loss() {
        let ds = data();
        let mut cfg = tiny_train_config();
        cfg.lr = 0.0;
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let before = t.store().clone();
        let batch = t.next_batch(&ds).unwrap();
        let first = t.step_on(&ds, &batch).unwrap();
        let second = t.step_on(&ds, &batch).unwrap();
        assert_eq!(first.l_total, second.l_total);
        for ((_, a), (_, b)) in before.iter().zip(t.store().iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn cat_off_reduces_to_softmax() {
        let ds = data();
        let mut cfg = tiny_train_config();
        cfg.cat_on = CatMode::Off;
        cfg.pram_on = false;
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let log = t.train_step(&ds).unwrap();
        assert_eq!(log.l_cat, 0.0);
        assert_eq!(log.l_total, log.l_softmax);
    }

    #[test]
    fn batch_hard_mining_runs() {
        let ds = data();
        let mut cfg = tiny_train_config();
        cfg.mining = Mining::BatchHard;
        let mut t = Trainer::new(cfg, &ds).unwrap();
        assert!(t.train_step(&ds).unwrap().l_total.is_finite());
    }

    #[test]
    fn embeddings_are_deterministic_and_round_trip() {
        let ds = data();
        let t = Trainer::new(tiny_train_config(), &ds).unwrap();
        let e = t.embed_dataset(&ds).unwrap();
        assert_eq!(e.len(), ds.len());
        assert_eq!(e, t.embed_dataset(&ds).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        write_embeddings(&path, &e).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, e);
        let p = protocol_from_embeddings(&e).unwrap();
        assert_eq!(p.gallery().len(), 4);
        assert_eq!(p.probes().len(), 8);
    }
}
