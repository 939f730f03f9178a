//! Cross-domain triplet sampling and batch assembly.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::losses::ComponentWeights;
use crate::mask::CropWindow;
use crate::model::{BatchInputs, PramModel};

/// Which domain negatives are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NegativeDomain {
    #[default]
    Anchor,
    Positive,
}

impl FromStr for NegativeDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(NegativeDomain::Anchor),
            "positive" => Ok(NegativeDomain::Positive),
            other => Err(Error::InvalidArgument(format!(
                "negative domain `{other}` (expected anchor or positive)"
            ))),
        }
    }
}

impl fmt::Display for NegativeDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeDomain::Anchor => "anchor",
            NegativeDomain::Positive => "positive",
        })
    }
}

/// Indices into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    /// Same identity across domains for `(a, p)`, a different identity for `n`
    /// in the configured domain.
    pub fn is_valid(&self, dataset: &Dataset, negative_domain: NegativeDomain) -> bool {
        let (a, p, n) = (
            dataset.get(self.anchor),
            dataset.get(self.positive),
            dataset.get(self.negative),
        );
        let n_domain = match negative_domain {
            NegativeDomain::Anchor => a.domain,
            NegativeDomain::Positive => p.domain,
        };
        a.identity == p.identity
            && n.identity != a.identity
            && a.domain != p.domain
            && n.domain == n_domain
    }
}

/// Draws `batch_size` triplets. Anchors alternate VIS, NIR, VIS, … by
/// position in the batch; identities and samples are uniform.
pub fn sample_triplets<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    negative_domain: NegativeDomain,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let index = dataset.index();
    let eligible: Vec<usize> = index
        .iter()
        .filter(|(_, d)| !d[0].is_empty() && !d[1].is_empty())
        .map(|(&id, _)| id)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Dataset(format!(
            "only {} of {} identities have samples in both domains; at least 2 are needed",
            eligible.len(),
            index.len()
        )));
    }
    let mut triplets = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let a_dom = Domain::BOTH[i % 2];
        let id = *eligible.choose(rng).expect("non-empty");
        let anchor = *index[&id][a_dom as usize].choose(rng).expect("eligible");
        let positive = *index[&id][a_dom.other() as usize].choose(rng).expect("eligible");
        let n_dom = match negative_domain {
            NegativeDomain::Anchor => a_dom,
            NegativeDomain::Positive => a_dom.other(),
        };
        let others: Vec<usize> = index
            .iter()
            .filter(|(&other, d)| other != id && !d[n_dom as usize].is_empty())
            .map(|(&other, _)| other)
            .collect();
        let neg_id = *others.choose(rng).expect("a second eligible identity exists");
        let negative = *index[&neg_id][n_dom as usize].choose(rng).expect("non-empty");
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(triplets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// One random offset per sample.
    Train,
    /// Centre offset for every sample.
    Eval,
}

/// Network inputs for `3·B` samples ordered anchors, positives, negatives.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub inputs: BatchInputs<f32>,
    /// Dataset index of every row.
    pub samples: Vec<usize>,
    /// Identity of every row.
    pub identities: Vec<usize>,
    /// λ of each triplet, from the uncropped anchor and positive masks.
    pub weights: Vec<ComponentWeights>,
    pub offsets: Vec<(usize, usize)>,
}

impl TrainingBatch {
    pub fn num_triplets(&self) -> usize {
        self.weights.len()
    }
}

/// Crops every sample of the triplets and builds the model inputs.
pub fn assemble_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    triplets: &[Triplet],
    model: &PramModel,
    window: &CropWindow,
    mode: CropMode,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no triplets".into()));
    }
    let samples: Vec<usize> = [
        triplets.iter().map(|t| t.anchor).collect::<Vec<_>>(),
        triplets.iter().map(|t| t.positive).collect(),
        triplets.iter().map(|t| t.negative).collect(),
    ]
    .concat();
    let mut crops = Vec::with_capacity(samples.len());
    let mut offsets = Vec::with_capacity(samples.len());
    for &i in &samples {
        let s = dataset.get(i);
        let offset = match mode {
            CropMode::Train => window.random_offset(rng),
            CropMode::Eval => window.center_offset(),
        };
        crops.push(window.apply(&s.image, &s.masks, offset)?);
        offsets.push(offset);
    }
    let weights = triplets
        .iter()
        .map(|t| {
            ComponentWeights::from_masks(&dataset.get(t.anchor).masks, &dataset.get(t.positive).masks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch {
        inputs: model.prepare_inputs(&crops)?,
        identities: samples.iter().map(|&i| dataset.get(i).identity).collect(),
        samples,
        weights,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FaceSample;
    use crate::mask::BinaryMask;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(identity: usize, domain: Domain, k: usize) -> FaceSample {
        FaceSample {
            sample_id: format!("{identity}-{domain}-{k}"),
            identity,
            domain,
            image: Tensor::zeros(&[1, 144, 144]),
            masks: vec![BinaryMask::empty(144, 144); 5],
        }
    }

    fn dataset(ids: usize, per: usize) -> Dataset {
        let mut v = Vec::new();
        for id in 0..ids {
            for d in Domain::BOTH {
                for k in 0..per {
                    v.push(sample(id, d, k));
                }
            }
        }
        Dataset::new(v).unwrap()
    }

    #[test]
    fn triplets_satisfy_constraints() {
        let ds = dataset(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for nd in [NegativeDomain::Anchor, NegativeDomain::Positive] {
            let mut vis = 0;
            for _ in 0..100 {
                for t in sample_triplets(&ds, 16, nd, &mut rng).unwrap() {
                    assert!(t.is_valid(&ds, nd));
                    vis += (ds.get(t.anchor).domain == Domain::Vis) as usize;
                }
            }
            assert_eq!(vis, 800);
        }
    }

    #[test]
    fn two_identities_give_only_valid_structure() {
        let ds = dataset(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = sample_triplets(&ds, 8, NegativeDomain::Anchor, &mut rng).unwrap();
        for t in ts {
            let a = ds.get(t.anchor);
            let n = ds.get(t.negative);
            assert_eq!(n.identity, 1 - a.identity);
            assert_eq!(n.domain, a.domain);
        }
    }

    #[test]
    fn deficient_dataset_is_rejected() {
        let ds = Dataset::new(vec![
            sample(0, Domain::Vis, 0),
            sample(0, Domain::Nir, 0),
            sample(1, Domain::Vis, 0),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_triplets(&ds, 4, NegativeDomain::Anchor, &mut rng).unwrap_err();
        assert!(err.to_string().contains("only 1 of 2"), "{err}");
    }

    #[test]
    fn seeded_sampling_repeats() {
        let ds = dataset(6, 2);
        let a = sample_triplets(&ds, 16, NegativeDomain::Anchor, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_triplets(&ds, 16, NegativeDomain::Anchor, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.unwrap(), b.unwrap());
    }
}
