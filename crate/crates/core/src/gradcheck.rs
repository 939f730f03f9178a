//! Finite-difference verification of analytic gradients (64-bit, fourth-order
//! central stencil).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per parameter;
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            epsilon: 1e-4,
            tolerance: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(loss).to_vec()))
}

/// Runs one forward/backward pass, then compares the resulting gradients
/// with central differences. Existing gradients in `store` are cleared.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    config: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Option<Tensor<f64>>> =
        store.iter().map(|(_, p)| p.grad.clone()).collect();
    compare_gradients(store, loss_fn, &analytic, config)
}

/// Compares caller-supplied analytic gradients (indexed like the store)
/// against central finite differences of `loss_fn`.
pub fn compare_gradients<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    analytic: &[Option<Tensor<f64>>],
    config: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&config.epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            config.epsilon
        )));
    }
    let base = eval(store, &loss_fn)?;
    let again = eval(store, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {base} and {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut entries = Vec::new();
    for id in ids {
        let (name, frozen, numel) = {
            let p = store.get(id);
            (p.name.clone(), p.frozen, p.tensor.numel())
        };
        if frozen {
            continue;
        }
        let zeros = Tensor::zeros(store.get(id).tensor.shape());
        let grad = analytic[id.index()].as_ref().unwrap_or(&zeros);
        let coords: Vec<usize> = match config.max_coords {
            Some(k) if k < numel => {
                let mut c = index::sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let orig = store.get(id).tensor.data()[c];
            let mut at = |offset: f64| {
                store.get_mut(id).tensor.data_mut()[c] = orig + offset;
                eval(store, &loss_fn)
            };
            let h = config.epsilon;
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * h);
            max_rel = max_rel.max(relative_error(grad.data()[c], numeric));
        }
        entries.push(ParamCheck {
            name,
            max_rel_error: max_rel,
            coords_checked: coords.len(),
        });
    }
    Ok(GradcheckReport {
        entries,
        tolerance: config.tolerance,
    })
}
