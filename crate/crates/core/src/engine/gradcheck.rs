use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Recording, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Which parameter entries a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    /// Every scalar of every parameter.
    All,
    /// Up to `per_param` seeded-random entries of each parameter tensor.
    Sampled { per_param: usize, seed: u64 },
}

/// Compares backward gradients against central differences over `store`.
///
/// `loss` builds a scalar on the graph it is given, pulling parameters via
/// [`Graph::param`]. Returns the maximum over parameter tensors of
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-8)`, with `|·|` the L2 norm
/// over the checked entries of that tensor.
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_with(store, h, Coverage::All, loss)
}

pub fn grad_check_with<F>(store: &mut ParamStore<f64>, h: f64, coverage: Coverage, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("step h = {h} outside [1e-7, 1e-4]")));
    }
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::with_params(store, Recording::On);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        let mut out = vec![None; store.len()];
        for (id, t) in grads.params() {
            out[id.index()] = Some(t.data().to_vec());
        }
        out
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store, Recording::Off);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_param, .. }, Some(rng)) if per_param < n => {
                let mut v = sample(rng, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let (mut diff, mut an, mut num) = (0.0f64, 0.0f64, 0.0f64);
        for k in entries {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let cd = (plus? - minus?) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[k]);
            diff += (a - cd) * (a - cd);
            an += a * a;
            num += cd * cd;
        }
        let rel = diff.sqrt() / an.sqrt().max(num.sqrt()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
