use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Scalar;

/// Plain SGD with L2 weight decay: `w ← w − lr·(grad + weight_decay·w)`.
///
/// Frozen parameters are left untouched. Gradients are not cleared; call
/// [`ParamStore::zero_grad`] separately.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: T, weight_decay: T) -> Result<()> {
    if !(lr >= T::zero()) || !(weight_decay >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "sgd_step needs lr ≥ 0 and weight_decay ≥ 0 (got {lr}, {weight_decay})"
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in store.iter_mut().filter(|p| !p.frozen) {
        let grad = p.grad.as_ref().expect("checked above");
        for (w, &g) in p.tensor.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * (g + weight_decay * *w);
        }
    }
    Ok(())
}
