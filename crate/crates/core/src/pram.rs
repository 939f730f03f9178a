//! Part relation attention: the ten unordered part pairs pass through one
//! shared relation layer and are fused by learnable per-relation weights.

use rand::Rng;

use crate::backbone::{init_bound, uniform_init, BIAS_INIT, NUM_PARTS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NUM_RELATIONS: usize = NUM_PARTS * (NUM_PARTS - 1) / 2;

/// All `(i, j)` with `i < j`, in lexicographic order.
pub const RELATION_PAIRS: [(usize, usize); NUM_RELATIONS] = {
    let mut pairs = [(0, 0); NUM_RELATIONS];
    let mut k = 0;
    let mut i = 0;
    while i < NUM_PARTS {
        let mut j = i + 1;
        while j < NUM_PARTS {
            pairs[k] = (i, j);
            k += 1;
            j += 1;
        }
        i += 1;
    }
    pairs
};

/// Shared relation layer `L2` (FC to `2·embed_dim`, then MFM) and the fusion
/// weights `alpha`. Parameters: `pram.l2.weight`, `pram.l2.bias`, `pram.alpha`.
#[derive(Clone, Debug)]
pub struct RelationAttention {
    head_dim: usize,
    embed_dim: usize,
    l2_weight: ParamId,
    l2_bias: ParamId,
    alpha: ParamId,
}

impl RelationAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        head_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if head_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("head_dim and embed_dim must be positive".into()));
        }
        let fan_in = 2 * head_dim;
        let l2_weight = store.add(
            "pram.l2.weight",
            uniform_init(rng, &[fan_in, 2 * embed_dim], init_bound(fan_in)),
        )?;
        let l2_bias = store.add(
            "pram.l2.bias",
            Tensor::full(&[2 * embed_dim], T::from_f64_lossy(BIAS_INIT)),
        )?;
        let alpha = store.add(
            "pram.alpha",
            Tensor::full(&[NUM_RELATIONS], T::from_f64_lossy(1.0 / NUM_RELATIONS as f64)),
        )?;
        Ok(RelationAttention {
            head_dim,
            embed_dim,
            l2_weight,
            l2_bias,
            alpha,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn l2_params(&self) -> (ParamId, ParamId) {
        (self.l2_weight, self.l2_bias)
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    /// Concatenates `(x_i, x_j)` for every pair into a `[10·N, 2·head_dim]`
    /// matrix, pair-major.
    pub fn enumerate_pairs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        parts: &[Var; NUM_PARTS],
    ) -> Result<Var> {
        enumerate_pairs(g, parts, self.head_dim)
    }

    /// Applies the shared relation layer to every pair row.
    pub fn relation_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pairs: Var,
    ) -> Result<Var> {
        let s = g.shape(pairs);
        if s.len() != 2 || s[1] != 2 * self.head_dim || s[0] % NUM_RELATIONS != 0 {
            return Err(Error::shape(
                "relation_features",
                format!("expected [10·N, {}], got {s:?}", 2 * self.head_dim),
            ));
        }
        let w = g.param(store, self.l2_weight);
        let b = g.param(store, self.l2_bias);
        let pre = g.linear(pairs, w, Some(b))?;
        g.mfm(pre)
    }

    /// `Σ_r alpha[r] · relation_r` → `[N, embed_dim]`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        relations: Var,
    ) -> Result<Var> {
        let alpha = g.param(store, self.alpha);
        fuse(g, relations, alpha)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        parts: &[Var; NUM_PARTS],
    ) -> Result<Var> {
        let pairs = self.enumerate_pairs(g, parts)?;
        let rel = self.relation_features(g, store, pairs)?;
        self.fuse(g, store, rel)
    }
}

pub fn enumerate_pairs<T: Scalar>(
    g: &mut Graph<T>,
    parts: &[Var; NUM_PARTS],
    head_dim: usize,
) -> Result<Var> {
    let n = g.shape(parts[0])[0];
    for &p in parts {
        if g.shape(p) != [n, head_dim] {
            return Err(Error::shape(
                "enumerate_pairs",
                format!("part feature {:?} != [{n}, {head_dim}]", g.shape(p)),
            ));
        }
    }
    let mut blocks = Vec::with_capacity(NUM_RELATIONS);
    for (i, j) in RELATION_PAIRS {
        blocks.push(g.concat_cols(&[parts[i], parts[j]])?);
    }
    g.concat_rows(&blocks)
}

pub fn fuse<T: Scalar>(g: &mut Graph<T>, relations: Var, alpha: Var) -> Result<Var> {
    if g.value(alpha).numel() != NUM_RELATIONS {
        return Err(Error::shape(
            "fuse",
            format!("alpha has {} entries, expected {NUM_RELATIONS}", g.value(alpha).numel()),
        ));
    }
    g.fuse(relations, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_list() {
        assert_eq!(RELATION_PAIRS.len(), 10);
        assert_eq!(&RELATION_PAIRS[..5], &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 2)]);
        assert_eq!(RELATION_PAIRS[9], (3, 4));
        let mut sorted = RELATION_PAIRS.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, RELATION_PAIRS.to_vec());
        assert!(RELATION_PAIRS.iter().all(|&(i, j)| i < j));
    }

    fn parts(g: &mut Graph<f64>, n: usize, d: usize) -> [Var; NUM_PARTS] {
        std::array::from_fn(|p| {
            g.input(Tensor::from_fn(&[n, d], |i| (p * 100 + i) as f64))
        })
    }

    #[test]
    fn pairs_concatenate_lower_index_first() {
        let mut g = Graph::new();
        let p = parts(&mut g, 2, 3);
        let pairs = enumerate_pairs(&mut g, &p, 3).unwrap();
        assert_eq!(g.shape(pairs), &[20, 6]);
        let v = g.value(pairs).data();
        // block 4 is pair (1, 2), row 1 of that block
        let row = &v[(4 * 2 + 1) * 6..(4 * 2 + 2) * 6];
        assert_eq!(row, &[103.0, 104.0, 105.0, 203.0, 204.0, 205.0]);
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::<f64>::new();
        let rel = g.input(Tensor::from_fn(&[10, 3], |i| i as f64));
        let one_hot = g.input(Tensor::from_fn(&[10], |i| (i == 7) as u8 as f64));
        let e = fuse(&mut g, rel, one_hot).unwrap();
        assert_eq!(g.value(e).data(), &[21.0, 22.0, 23.0]);
        let zeros = g.input(Tensor::zeros(&[10]));
        let e = fuse(&mut g, rel, zeros).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let same = g.input(Tensor::from_fn(&[10, 2], |i| [0.5, -2.0][i % 2]));
        let tenth = g.input(Tensor::full(&[10], 0.1));
        let e = fuse(&mut g, same, tenth).unwrap();
        for (a, b) in g.value(e).data().iter().zip([0.5, -2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = g.input(Tensor::zeros(&[9]));
        assert!(fuse(&mut g, rel, bad).is_err());
    }

    #[test]
    fn shared_layer_and_output_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ra = RelationAttention::new(&mut store, 4, 6, &mut rng).unwrap();
        assert_eq!(store.get(ra.l2_params().0).tensor.shape(), &[8, 12]);
        let mut g = Graph::new();
        let same: [Var; NUM_PARTS] = {
            let v = g.input(Tensor::from_fn(&[1, 4], |i| i as f64 - 1.5));
            [v; NUM_PARTS]
        };
        let pairs = ra.enumerate_pairs(&mut g, &same).unwrap();
        let rel = ra.relation_features(&mut g, &store, pairs).unwrap();
        assert_eq!(g.shape(rel), &[10, 6]);
        let r = g.value(rel).data();
        for k in 1..10 {
            assert_eq!(r[..6], r[k * 6..(k + 1) * 6]);
        }
        let e = ra.fuse(&mut g, &store, rel).unwrap();
        assert_eq!(g.shape(e), &[1, 6]);
    }
}
