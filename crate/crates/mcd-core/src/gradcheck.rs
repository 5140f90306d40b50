//! Central finite-difference verification of autograd.
//!
//! Every differentiable op and composite block is checked by perturbing
//! parameter elements one at a time and comparing (f(x+h) - f(x-h)) / 2h
//! against the tape gradient. Run in f64: with h = 1e-5 the truncation and
//! rounding errors both sit well below the 1e-4 / 1e-3 thresholds.

use crate::error::Result;
use crate::params::{ParamStore, ParamId};
use crate::tensor::{Graph, Tensor};

/// Which elements of each parameter tensor get perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Elements {
    All,
    /// Evenly spaced sample of at most this many elements per tensor.
    Sample(usize),
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: Option<WorstElement>,
    pub elements_checked: usize,
}

#[derive(Debug, Clone)]
pub struct WorstElement {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Relative error with an absolute floor: discrepancies on gradients whose
/// magnitude sits below `floor` are measured against `floor` instead, so
/// finite-difference noise on near-zero entries does not register as a
/// relative-error blowup.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

fn selected_indices(len: usize, elements: Elements) -> Vec<usize> {
    match elements {
        Elements::All => (0..len).collect(),
        Elements::Sample(k) => {
            if len <= k {
                (0..len).collect()
            } else {
                (0..k).map(|i| i * len / k).collect()
            }
        }
    }
}

/// Magnitude floor for shallow single-op graphs.
pub const FLOOR_PRIMITIVE: f64 = 1e-6;
/// Magnitude floor for deep composite graphs, where finite differences on
/// an O(10) output cannot resolve gradients below ~1e-7.
pub const FLOOR_COMPOSITE: f64 = 1e-4;

/// Verify the gradient of `build`'s scalar output with respect to every
/// parameter in `store`. `build` must be a deterministic function of the
/// store contents.
pub fn check<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    elements: Elements,
    h: f64,
    floor: f64,
    build: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Tensor>,
{
    // Analytic gradients from one tape pass.
    let mut graph = Graph::new();
    let root = build(&mut graph, store)?;
    graph.backward(root)?;
    let analytic = store.collect_grads(&graph);
    drop(graph);

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.entry(id).data.len();
        let grads = analytic[id.0].clone().unwrap_or_else(|| vec![0.0; len]);
        for idx in selected_indices(len, elements) {
            let original = store.entry(id).data[idx];

            store.entry_mut(id).data[idx] = original + h;
            let mut g_plus = Graph::new();
            let r = build(&mut g_plus, store)?;
            let f_plus = g_plus.item(r);
            drop(g_plus);

            store.entry_mut(id).data[idx] = original - h;
            let mut g_minus = Graph::new();
            let r = build(&mut g_minus, store)?;
            let f_minus = g_minus.item(r);
            drop(g_minus);

            store.entry_mut(id).data[idx] = original;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(grads[idx], numeric, floor);
            checked += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some(WorstElement {
                    param: store.entry(id).name.clone(),
                    index: idx,
                    analytic: grads[idx],
                    numeric,
                });
            }
        }
    }

    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err,
        worst,
        elements_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_correct_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("x", vec![0.3, -1.2, 0.7], &[3], true);
        let report = check("silu-sum", &mut store, Elements::All, 1e-5, FLOOR_PRIMITIVE, |g, s| {
            let x = g.param(s, s.lookup("x").unwrap());
            let y = g.silu(x);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(report.passes(1e-6), "max err {}", report.max_rel_err);
    }

    #[test]
    fn sampling_selects_even_spread() {
        assert_eq!(selected_indices(10, Elements::Sample(3)), vec![0, 3, 6]);
        assert_eq!(selected_indices(2, Elements::Sample(5)), vec![0, 1]);
    }
}
