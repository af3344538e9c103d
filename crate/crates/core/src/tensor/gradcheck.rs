//! Central finite-difference gradient checking.
//!
//! The oracle only ever runs the forward pass, so it is independent of the
//! reverse-mode code it validates. Loss evaluations use the tape's f64
//! scalar view to keep the difference quotient above f32 rounding noise.

use rand::Rng;

use super::{ParamStore, TensorResult};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients against central differences on `count`
/// randomly chosen parameter coordinates under `prefix`.
///
/// `loss` must be a pure function of the store (fixed data, fixed RNG
/// streams inside). It is also expected to have populated `store` gradients
/// via `backward` before this is called... instead we recompute: the checker
/// runs `backward` itself through the provided closure contract below.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    prefix: &str,
    count: usize,
    eps: f64,
    rng: &mut impl Rng,
    mut loss: F,
) -> TensorResult<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> TensorResult<f64>,
{
    store.zero_grads();
    let _ = loss(store, true)?;

    let coords = {
        let named: Vec<(String, usize)> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(|n| (n.to_string(), store.get(n).unwrap().len()))
            .filter(|(_, len)| *len > 0)
            .collect();
        let total: usize = named.iter().map(|(_, l)| l).sum();
        let mut picks = Vec::with_capacity(count);
        for _ in 0..count {
            let mut k = rng.random_range(0..total);
            for (name, len) in &named {
                if k < *len {
                    picks.push((name.clone(), k));
                    break;
                }
                k -= len;
            }
        }
        picks
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (name, idx) in coords {
        let analytic = store.grad(&name).map(|g| g[idx] as f64).unwrap_or(0.0);
        let orig = store.get(&name).unwrap().data[idx];

        store.get_mut(&name).unwrap().data[idx] = (orig as f64 + eps) as f32;
        let up = loss(store, false)?;
        store.get_mut(&name).unwrap().data[idx] = (orig as f64 - eps) as f32;
        let down = loss(store, false)?;
        store.get_mut(&name).unwrap().data[idx] = orig;

        let fd = (up - down) / (2.0 * eps);
        // Coordinates where both sides are ~zero agree by definition; the
        // floor keeps f32 forward noise from dominating tiny gradients.
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((name.clone(), idx, analytic, fd));
        }
    }
    store.zero_grads();
    Ok(GradCheckReport {
        checked: count,
        max_rel_err: max_rel,
        worst,
    })
}
