//! Cosine similarity, the conditional-margin triplet term, its
//! component-adaptive (IoU-weighted) sum, and the scaled softmax loss.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{PartFeatureSet, NUM_PARTS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{iou, BinaryMask};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Where the softmax scale factor `s` is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// `s · CE(W·e)`.
    LossScale,
    /// `CE(W·(s · e/‖e‖))`; no further multiplication by `s`.
    FeatureScale,
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_scale" => Ok(ScaleMode::LossScale),
            "feature_scale" => Ok(ScaleMode::FeatureScale),
            other => Err(Error::Config(format!(
                "scale_mode `{other}` (expected loss_scale or feature_scale)"
            ))),
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::LossScale => "loss_scale",
            ScaleMode::FeatureScale => "feature_scale",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub softmax_scale: f64,
    pub scale_mode: ScaleMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.55,
            softmax_scale: 24.0,
            scale_mode: ScaleMode::LossScale,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(Error::Config(format!("loss.margin {} outside (0, 2)", self.margin)));
        }
        if !(self.softmax_scale > 0.0) {
            return Err(Error::Config(format!(
                "loss.softmax_scale {} must be positive",
                self.softmax_scale
            )));
        }
        Ok(())
    }
}

/// Per-component IoU weights `λ` between anchor and positive masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentWeights {
    pub lambda: [f64; NUM_PARTS],
}

impl ComponentWeights {
    pub fn ones() -> Self {
        ComponentWeights {
            lambda: [1.0; NUM_PARTS],
        }
    }

    pub fn from_masks(anchor: &[BinaryMask], positive: &[BinaryMask]) -> Result<Self> {
        if anchor.len() != NUM_PARTS || positive.len() != NUM_PARTS {
            return Err(Error::shape(
                "component weights",
                format!("need {NUM_PARTS} masks each, got {} and {}", anchor.len(), positive.len()),
            ));
        }
        let mut lambda = [0.0; NUM_PARTS];
        for (l, (a, p)) in lambda.iter_mut().zip(anchor.iter().zip(positive)) {
            *l = iou(a, p)?;
        }
        Ok(ComponentWeights { lambda })
    }

    pub fn mean(&self) -> f64 {
        self.lambda.iter().sum::<f64>() / NUM_PARTS as f64
    }
}

pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", u.len(), v.len())));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv = v.iter().map(|&b| b * b).sum::<T>().sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::degenerate("cosine_similarity", "zero-norm vector"));
    }
    Ok(dot / (nu * nv))
}

/// `max(0, (s_n + 1)/(s_p + 1) − m)`.
pub fn conditional_triplet(s_p: f64, s_n: f64, margin: f64) -> Result<f64> {
    if s_p + 1.0 <= 0.0 {
        return Err(Error::degenerate(
            "conditional_triplet",
            format!("anchor/positive similarity {s_p} makes the ratio undefined"),
        ));
    }
    Ok(((s_n + 1.0) / (s_p + 1.0) - margin).max(0.0))
}

/// Batched component-adaptive triplet loss.
///
/// `anchor`, `positive` and `negative` hold one `[B, head_dim]` feature
/// matrix per part; `weights[b]` are the λ of triplet `b`. Returns the
/// per-triplet losses `[B]`. λ is a constant: no gradient reaches the masks.
pub fn cat_per_triplet<T: Scalar>(
    g: &mut Graph<T>,
    anchor: &[Var; NUM_PARTS],
    positive: &[Var; NUM_PARTS],
    negative: &[Var; NUM_PARTS],
    weights: &[ComponentWeights],
    margin: f64,
) -> Result<Var> {
    let b = g.shape(anchor[0])[0];
    if weights.len() != b {
        return Err(Error::shape(
            "component_adaptive_triplet",
            format!("{} weight sets for {b} triplets", weights.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for part in 0..NUM_PARTS {
        let sp = g.row_cosine(anchor[part], positive[part])?;
        let sn = g.row_cosine(anchor[part], negative[part])?;
        let lc = g.conditional_triplet(sp, sn, T::from_f64_lossy(margin))?;
        let lambda = weights
            .iter()
            .map(|w| T::from_f64_lossy(w.lambda[part]))
            .collect();
        let weighted = g.mul_const(lc, lambda)?;
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    Ok(total.expect("NUM_PARTS > 0"))
}

/// `L_CAT` for a single triplet of part-feature sets and the anchor/positive
/// masks, returned together with the λ weights it used.
pub fn component_adaptive_triplet<T: Scalar>(
    anchor: &PartFeatureSet<T>,
    positive: &PartFeatureSet<T>,
    negative: &PartFeatureSet<T>,
    masks_anchor: &[BinaryMask],
    masks_positive: &[BinaryMask],
    margin: f64,
) -> Result<(f64, ComponentWeights)> {
    let weights = ComponentWeights::from_masks(masks_anchor, masks_positive)?;
    let mut g = Graph::<T>::new();
    let d = anchor.dim();
    let mut load = |set: &PartFeatureSet<T>| -> Result<[Var; NUM_PARTS]> {
        if set.dim() != d {
            return Err(Error::shape("component_adaptive_triplet", "feature dims differ"));
        }
        let mut vars = Vec::with_capacity(NUM_PARTS);
        for f in set.features() {
            vars.push(g.input(Tensor::new(vec![1, d], f.clone())?));
        }
        Ok(vars.try_into().expect("five parts"))
    };
    let a = load(anchor)?;
    let p = load(positive)?;
    let n = load(negative)?;
    let per = cat_per_triplet(&mut g, &a, &p, &n, &[weights], margin)?;
    let value = g.value(per).data()[0].to_f64().unwrap_or(f64::NAN);
    Ok((value, weights))
}

/// Mean softmax cross-entropy of `embedding · classifier` against `labels`,
/// with the scale `s` applied per `config.scale_mode`.
pub fn scaled_softmax_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    embedding: Var,
    labels: &[usize],
    classifier: ParamId,
    config: &LossConfig,
) -> Result<Var> {
    let w = g.param(store, classifier);
    let s = T::from_f64_lossy(config.softmax_scale);
    match config.scale_mode {
        ScaleMode::LossScale => {
            let logits = g.linear(embedding, w, None)?;
            let ce = g.softmax_cross_entropy(logits, labels)?;
            let mean = g.mean(ce);
            Ok(g.scale(mean, s))
        }
        ScaleMode::FeatureScale => {
            let unit = g.l2_normalize(embedding)?;
            let scaled = g.scale(unit, s);
            let logits = g.linear(scaled, w, None)?;
            let ce = g.softmax_cross_entropy(logits, labels)?;
            Ok(g.mean(ce))
        }
    }
}

/// Softmax term (already scaled) plus the triplet term.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, softmax_term: Var, cat_term: Var) -> Result<Var> {
    g.add(softmax_term, cat_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -2.0, 5.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn conditional_triplet_examples() {
        assert_eq!(conditional_triplet(1.0, -1.0, 0.55).unwrap(), 0.0);
        assert!((conditional_triplet(0.3, 0.3, 0.55).unwrap() - 0.45).abs() < 1e-12);
        assert!((conditional_triplet(0.2, 0.8, 0.55).unwrap() - 0.95).abs() < 1e-9);
        assert!(conditional_triplet(-1.0, 0.0, 0.55).is_err());
    }

    #[test]
    fn scale_mode_parsing() {
        assert_eq!("loss_scale".parse::<ScaleMode>().unwrap(), ScaleMode::LossScale);
        assert_eq!("feature_scale".parse::<ScaleMode>().unwrap(), ScaleMode::FeatureScale);
        assert!("both".parse::<ScaleMode>().is_err());
        assert!(LossConfig { margin: 2.0, ..Default::default() }.validate().is_err());
    }

    fn classifier_store(e: usize, k: usize, w: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("classifier.weight", Tensor::full(&[e, k], w)).unwrap();
        (store, id)
    }

    #[test]
    fn uniform_logits_give_scaled_log_k() {
        let (store, id) = classifier_store(3, 4, 0.0);
        let mut g = Graph::new();
        let e = g.input(Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0));
        let cfg = LossConfig::default();
        let l = scaled_softmax_loss(&mut g, &store, e, &[0, 3], id, &cfg).unwrap();
        let v = g.value(l).item().unwrap();
        assert!((v - 24.0 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 33.27).abs() < 0.01);

        let plain = LossConfig { softmax_scale: 1.0, ..cfg };
        let l = scaled_softmax_loss(&mut g, &store, e, &[0, 3], id, &plain).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let fs = LossConfig { scale_mode: ScaleMode::FeatureScale, ..cfg };
        let l = scaled_softmax_loss(&mut g, &store, e, &[0, 3], id, &fs).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        let z = g.input(Tensor::zeros(&[1, 3]));
        assert!(scaled_softmax_loss(&mut g, &store, z, &[0], id, &fs).is_err());
    }

    #[test]
    fn confident_classifier_drives_loss_to_zero() {
        let mut store = ParamStore::new();
        let id = store
            .add("classifier.weight", Tensor::new(vec![1, 2], vec![1e3, -1e3]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let e = g.input(Tensor::full(&[1, 1], 1.0));
        let l = scaled_softmax_loss(&mut g, &store, e, &[0], id, &LossConfig::default()).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn total_is_a_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(24.0 * 4f64.ln()));
        let b = g.input(Tensor::scalar(2.25));
        let zero = g.input(Tensor::scalar(0.0));
        let t = total_loss(&mut g, a, b).unwrap();
        assert!((g.value(t).item().unwrap() - 35.52).abs() < 0.01);
        let t = total_loss(&mut g, a, zero).unwrap();
        assert_eq!(g.value(t).item(), g.value(a).item());
        let t = total_loss(&mut g, zero, b).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 2.25);
    }

    fn features(rng: &mut ChaCha8Rng, d: usize) -> PartFeatureSet<f64> {
        use rand::Rng;
        PartFeatureSet::new(std::array::from_fn(|_| {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        }))
        .unwrap()
    }

    #[test]
    fn cat_zero_weights_and_full_face_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, p, n) = (features(&mut rng, 6), features(&mut rng, 6), features(&mut rng, 6));
        let full = BinaryMask::from_fn(8, 8, |_, _| true);
        let left = BinaryMask::from_fn(8, 8, |_, c| c < 4);
        let right = BinaryMask::from_fn(8, 8, |_, c| c >= 4);
        let (l, w) = component_adaptive_triplet(
            &a,
            &p,
            &n,
            &vec![left.clone(); 5],
            &vec![right.clone(); 5],
            0.55,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(w.lambda, [0.0; 5]);

        let mut ma = vec![left.clone(); 5];
        let mut mp = vec![right; 5];
        ma[0] = full.clone();
        mp[0] = full;
        let (l, w) = component_adaptive_triplet(&a, &p, &n, &ma, &mp, 0.55).unwrap();
        assert_eq!(w.lambda, [1.0, 0.0, 0.0, 0.0, 0.0]);
        let sp = cosine_similarity(a.get(crate::Part::Full), p.get(crate::Part::Full)).unwrap();
        let sn = cosine_similarity(a.get(crate::Part::Full), n.get(crate::Part::Full)).unwrap();
        assert!((l - conditional_triplet(sp, sn, 0.55).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cat_equal_similarities_all_weights_one() {
        // positive == negative gives S_p == S_n on every component
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, p) = (features(&mut rng, 5), features(&mut rng, 5));
        let full = vec![BinaryMask::from_fn(4, 4, |_, _| true); 5];
        let (l, _) = component_adaptive_triplet(&a, &p, &p, &full, &full, 0.55).unwrap();
        assert!((l - 2.25).abs() < 1e-12);
    }
}
