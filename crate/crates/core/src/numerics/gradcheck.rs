//! Finite-difference gradient verification.
//!
//! The analytic side runs the production graph (f32-quantized values); the
//! numeric side evaluates the same builder through an unquantized graph so
//! the central difference (f(θ+h) − f(θ−h)) / 2h at h ≈ 1e-3 is not
//! dominated by rounding steps. Relative error uses
//! |a − n| / max(|a|, |n|, 1e-8).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Cap on coordinates probed per parameter; `None` sweeps all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate subsampling.
    pub seed: u64,
    /// Run the analytic backward without per-node f32 rounding. Deep graphs
    /// accumulate rounding noise near 1e-3 relative on small-magnitude
    /// gradients, which would mask real derivative bugs; the rounding path
    /// itself is covered by the per-op checks that leave this off.
    pub analytic_unquantized: bool,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-3,
            max_coords_per_param: None,
            seed: 0,
            analytic_unquantized: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences over every (or a sampled subset of) parameter coordinate.
///
/// `build` must construct the loss from parameter leaves of `params` via
/// [`Graph::param`] so gradients can be routed back by name.
pub fn grad_check<F>(
    build: F,
    params: &ParamSet,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&ParamSet, &mut Graph) -> Result<NodeId, NumericsError>,
{
    // Analytic pass, in production mode unless configured otherwise.
    let mut g = if opts.analytic_unquantized {
        Graph::new_unquantized()
    } else {
        Graph::new()
    };
    let loss = build(params, &mut g)?;
    if g.value(loss).len() != 1 {
        return Err(NumericsError::GradCheck(format!(
            "loss must be scalar, got shape {:?}",
            g.shape(loss)
        )));
    }
    if !g.value(loss).all_finite() {
        return Err(NumericsError::NonFinite {
            context: "grad_check loss".into(),
        });
    }
    let grads = g.backward(loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::with_capacity(params.len());
    {
        // Collect per-parameter analytic grads through a scratch set.
        let mut scratch = params.clone();
        scratch.zero_grads();
        grads.accumulate_into(&mut scratch);
        for (_, p) in scratch.iter() {
            analytic.push((p.name.clone(), p.grad.data().to_vec()));
        }
    }

    let eval = |p: &ParamSet| -> Result<f64, NumericsError> {
        let mut g = Graph::new_unquantized();
        let loss = build(p, &mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(NumericsError::NonFinite {
                context: "grad_check numeric evaluation".into(),
            });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for (pid, (name, agrad)) in params.iter().map(|(id, _)| id).zip(&analytic) {
        let n = agrad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(cap);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };

        for &i in &coords {
            let orig = work.value(pid).data()[i];
            work.value_mut(pid).data_mut()[i] = orig + opts.step;
            let fp = eval(&work)?;
            work.value_mut(pid).data_mut()[i] = orig - opts.step;
            let fm = eval(&work)?;
            work.value_mut(pid).data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = rel_err(agrad[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord {
                    param: name.clone(),
                    index: i,
                    analytic: agrad[i],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }

    Ok(report)
}
