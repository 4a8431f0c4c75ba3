//! Central finite-difference checks against the tape.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Largest relative discrepancy `|g_ad - g_fd| / max(1, |g_fd|)` between
/// reverse-mode and central-difference gradients of a scalar function of
/// one input tensor.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Result<Tensor<'g>>,
{
    let g = Graph::new();
    let xt = g.variable(x.to_vec(), shape)?;
    f(&g, xt)?.backward()?;
    let ad = xt.grad();

    let eval = |v: Vec<f64>| -> Result<f64> {
        let g = Graph::new();
        let t = g.constant(v, shape)?;
        Ok(f(&g, t)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((ad[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Same check over every trainable parameter of a store. `f` builds the
/// loss from parameters bound with [`Graph::param`].
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Tensor<'g>>,
{
    let entries: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .flat_map(|(id, p)| (0..p.numel()).map(move |i| (id, i)))
        .collect();
    grad_check_entries(store, f, &entries, eps)
}

/// Check only the listed `(parameter, flat index)` entries; for models too
/// large to perturb every weight.
pub fn grad_check_entries<F>(
    store: &mut ParamStore,
    f: F,
    entries: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Tensor<'g>>,
{
    let grads = {
        let g = Graph::new();
        f(&g, store)?.backward()?;
        g.param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, s)?.item())
    };
    let mut worst = 0.0f64;
    for &(id, i) in entries {
        let ad = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, g)| g[i]);
        let orig = store.get(id).data[i];
        store.get_mut(id).data_mut()[i] = orig + eps;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - eps;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
