//! Training objectives and the information/calibration report.
//!
//! Three routes to the same goal, deliberately kept independent so they can
//! cross-check each other:
//!
//! * the snapshot loss, a cross entropy on `(x_0, x_t, t)` triples;
//! * the path-wise loss, an exact time quadrature against oracle marginals,
//!   computed in two algebraic forms that must agree;
//! * the Campbell estimator, a Monte-Carlo sum over the state-changing
//!   jumps of forward paths, unbiased for the path-wise loss.
//!
//! The masked specialization collapses the path-wise loss to a closed form,
//! and [`nll_gap_report`] decomposes the snapshot-vs-path NLL difference
//! into an information term and a calibration term on shared quadrature
//! nodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{JumpModel, MeanModel, Role, TabularDenoiser};
use crate::kernel::JumpKernel;
use crate::math;
use crate::oracle::{
    conditional_reverse_from_parts, generator_at, transition_grid, DataDistribution, OracleError,
};
use crate::quad::Quadrature;
use crate::schedule::{Schedule, ScheduleError};
use crate::uniformize::JumpPath;

/// Maximum tolerated relative disagreement between the two algebraic forms
/// of the path-wise integrand.
pub const FORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(
        "the two forms of the path-wise loss disagree: {form_flux} vs {form_ce}; \
         this indicates an internal inconsistency"
    )]
    FormMismatch { form_flux: f64, form_ce: f64 },
    #[error("invalid batch: {reason}")]
    BadBatch { reason: &'static str },
    #[error("unsupported configuration: {reason}")]
    Unsupported { reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Snapshot,
    PathQuadrature,
    Campbell,
}

/// A loss value with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub value: f64,
    pub kind: LossKind,
    /// Per-position values when the batch came from a sequence.
    pub per_position: Option<Vec<f64>>,
}

/// Mean negative log-likelihood of the clean token over a batch of
/// `(x_0, x_t, t)` snapshots.
pub fn snapshot_loss(
    model: &impl MeanModel,
    batch: &[(u32, u32, f64)],
) -> Result<LossSample, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::BadBatch {
            reason: "snapshot batch is empty",
        });
    }
    let m = model.len();
    let mut log_mu = vec![0.0; m];
    let mut total = 0.0;
    for &(x0, x_t, t) in batch {
        model.log_mean_into(x_t, t, &mut log_mu);
        total -= log_mu[x0 as usize];
    }
    Ok(LossSample {
        value: total / batch.len() as f64,
        kind: LossKind::Snapshot,
        per_position: None,
    })
}

/// Snapshot loss plus its analytic gradient (batch mean) for a tabular
/// model.
pub fn snapshot_loss_and_grad(
    model: &TabularDenoiser,
    batch: &[(u32, u32, f64)],
    grad: &mut [f64],
) -> Result<LossSample, ObjectiveError> {
    if model.role() != Role::Mean {
        return Err(ObjectiveError::BadBatch {
            reason: "snapshot gradients need a Mean-role model",
        });
    }
    if batch.is_empty() {
        return Err(ObjectiveError::BadBatch {
            reason: "snapshot batch is empty",
        });
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &(x0, x_t, t) in batch {
        total += model.nll_and_grad_weighted(x_t, t, x0, w, grad);
    }
    Ok(LossSample {
        value: total,
        kind: LossKind::Snapshot,
        per_position: None,
    })
}

/// Weighted snapshot loss over explicit `(x_0, x_t, t, weight)` entries,
/// with the weighted gradient accumulated into `grad`.  Used to evaluate
/// population expectations exactly on enumerable instances.
pub fn snapshot_loss_weighted(
    model: &TabularDenoiser,
    entries: &[(u32, u32, f64, f64)],
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    if model.role() != Role::Mean {
        return Err(ObjectiveError::BadBatch {
            reason: "snapshot gradients need a Mean-role model",
        });
    }
    let mut total = 0.0;
    for &(x0, x_t, t, w) in entries {
        if w != 0.0 {
            total += model.nll_and_grad_weighted(x_t, t, x0, w, grad);
        }
    }
    Ok(total)
}

/// The path-wise loss at one clean token, with both algebraic forms and
/// the conditional-entropy floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathwiseBreakdown {
    /// Canonical value (the flux form).
    pub value: f64,
    /// Flux form: sum over ordered pairs of marginal times forward rate.
    pub form_flux: f64,
    /// Rate-times-cross-entropy form through the conditional reverse
    /// kernel.
    pub form_ce: f64,
    /// Same quadrature with the model replaced by the exact reverse
    /// kernel: the loss cannot go below this.
    pub entropy_floor: f64,
}

fn pathwise_breakdowns(
    model: &impl JumpModel,
    kern: &JumpKernel,
    sched: &Schedule,
    rule: &Quadrature,
) -> Result<Vec<PathwiseBreakdown>, ObjectiveError> {
    let m = kern.len();
    let grid = transition_grid(kern, sched, rule.nodes())?;
    let mut flux = vec![0.0; m];
    let mut ce = vec![0.0; m];
    let mut floor = vec![0.0; m];
    let mut log_j = vec![vec![0.0; m]; m];
    let mut q_cond = vec![0.0; m];
    for ((t, w), k_op) in rule.points().zip(&grid) {
        let q_fwd = generator_at(kern, sched, t)?;
        for (x, row) in log_j.iter_mut().enumerate() {
            model.log_jump_into(x as u32, t, row);
        }
        for x0 in 0..m {
            for (x, q) in q_cond.iter_mut().enumerate() {
                *q = k_op.entry(x, x0).max(0.0);
            }
            // Flux form: every ordered pair weighted by occupancy times
            // forward rate; no divisions, so zero-mass states are benign.
            let mut node_flux = 0.0;
            for y in 0..m {
                let qy = q_cond[y];
                if qy == 0.0 {
                    continue;
                }
                for x in 0..m {
                    if x != y {
                        let rate = q_fwd.entry(x, y);
                        if rate > 0.0 {
                            node_flux += qy * rate * (-log_j[x][y]);
                        }
                    }
                }
            }
            // Reverse-kernel form: exit rate times cross entropy at each
            // occupied state, and the entropy of the exact kernel as the
            // floor.
            let rev = conditional_reverse_from_parts(&q_cond, &q_fwd);
            let mut node_ce = 0.0;
            let mut node_floor = 0.0;
            for x in 0..m {
                let weight = q_cond[x] * rev.exit_rates[x];
                if weight <= 0.0 {
                    continue;
                }
                let mut ce_x = 0.0;
                let mut h_x = 0.0;
                for y in 0..m {
                    let r = rev.jump.entry(y, x);
                    if r > 0.0 {
                        ce_x -= r * log_j[x][y];
                        h_x -= r * math::ln(r);
                    }
                }
                node_ce += weight * ce_x;
                node_floor += weight * h_x;
            }
            flux[x0] += w * node_flux;
            ce[x0] += w * node_ce;
            floor[x0] += w * node_floor;
        }
    }
    let mut out = Vec::with_capacity(m);
    for x0 in 0..m {
        if (flux[x0] - ce[x0]).abs() > FORM_TOL * flux[x0].abs().max(1.0) {
            return Err(ObjectiveError::FormMismatch {
                form_flux: flux[x0],
                form_ce: ce[x0],
            });
        }
        out.push(PathwiseBreakdown {
            value: flux[x0],
            form_flux: flux[x0],
            form_ce: ce[x0],
            entropy_floor: floor[x0],
        });
    }
    Ok(out)
}

/// Path-wise loss for one clean token by exact quadrature, with the
/// internal two-form cross-check.
pub fn pathwise_loss_detail(
    model: &impl JumpModel,
    kern: &JumpKernel,
    sched: &Schedule,
    x0: u32,
    rule: &Quadrature,
) -> Result<PathwiseBreakdown, ObjectiveError> {
    let all = pathwise_breakdowns(model, kern, sched, rule)?;
    all.get(x0 as usize)
        .copied()
        .ok_or(ObjectiveError::BadBatch {
            reason: "clean token outside the vocabulary",
        })
}

/// Path-wise loss for one clean token.
pub fn pathwise_loss_quadrature(
    model: &impl JumpModel,
    kern: &JumpKernel,
    sched: &Schedule,
    x0: u32,
    rule: &Quadrature,
) -> Result<LossSample, ObjectiveError> {
    Ok(LossSample {
        value: pathwise_loss_detail(model, kern, sched, x0, rule)?.value,
        kind: LossKind::PathQuadrature,
        per_position: None,
    })
}

/// Path-wise loss averaged over a data distribution on one shared
/// transition grid.
pub fn pathwise_loss_averaged(
    model: &impl JumpModel,
    kern: &JumpKernel,
    sched: &Schedule,
    qdata: &DataDistribution,
    rule: &Quadrature,
) -> Result<LossSample, ObjectiveError> {
    if qdata.len() != kern.len() {
        return Err(ObjectiveError::BadBatch {
            reason: "data distribution and kernel sizes differ",
        });
    }
    let all = pathwise_breakdowns(model, kern, sched, rule)?;
    let value = all
        .iter()
        .zip(qdata.probs())
        .map(|(b, &q)| q * b.value)
        .sum();
    Ok(LossSample {
        value,
        kind: LossKind::PathQuadrature,
        per_position: None,
    })
}

/// Masked-diffusion closed form of the path-wise loss: with an absorbing
/// kernel the integrand collapses to `-alpha'(t)` times the cross entropy
/// of the model's prediction at the mask state.
pub fn mdm_loss(
    model: &impl JumpModel,
    mask: u32,
    sched: &Schedule,
    x0: u32,
    rule: &Quadrature,
) -> Result<f64, ObjectiveError> {
    let m = model.len();
    if x0 as usize >= m || mask as usize >= m {
        return Err(ObjectiveError::BadBatch {
            reason: "token outside the vocabulary",
        });
    }
    let mut log_j = vec![0.0; m];
    let mut total = 0.0;
    for (t, w) in rule.points() {
        let dens = sched.exit_rate(t)? * sched.alpha(t)?; // -alpha'(t)
        model.log_jump_into(mask, t, &mut log_j);
        total += w * dens * (-log_j[x0 as usize]);
    }
    Ok(total)
}

/// Monte-Carlo estimate of the path-wise loss from forward paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampbellEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
    /// State-changing jumps that fell inside the window.
    pub jumps: usize,
}

impl CampbellEstimate {
    pub fn sample(&self) -> LossSample {
        LossSample {
            value: self.mean,
            kind: LossKind::Campbell,
            per_position: None,
        }
    }
}

fn window_ok(window: Option<(f64, f64)>) -> Result<(), ObjectiveError> {
    if let Some((lo, hi)) = window {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(ObjectiveError::BadBatch {
                reason: "campbell window must satisfy 0 <= lo < hi <= 1",
            });
        }
    }
    Ok(())
}

fn in_window(t: f64, window: Option<(f64, f64)>) -> bool {
    match window {
        Some((lo, hi)) => t >= lo && t <= hi,
        None => true,
    }
}

/// Per-jump cross entropy summed along each path and averaged over the
/// batch.  Only state-changing jumps count; uniformization self-epochs
/// carry no information.  An optional window restricts to jump times in
/// `[lo, hi]`, matching a clipped quadrature.
pub fn campbell_loss(
    model: &impl JumpModel,
    paths: &[JumpPath],
    window: Option<(f64, f64)>,
) -> Result<CampbellEstimate, ObjectiveError> {
    window_ok(window)?;
    if paths.is_empty() {
        return Err(ObjectiveError::BadBatch {
            reason: "campbell batch is empty",
        });
    }
    let m = model.len();
    let mut log_j = vec![0.0; m];
    let mut sums = Vec::with_capacity(paths.len());
    let mut jumps = 0usize;
    for path in paths {
        let mut s = 0.0;
        for (time, from, to) in path.true_jumps() {
            if in_window(time, window) {
                model.log_jump_into(to, time, &mut log_j);
                s -= log_j[from as usize];
                jumps += 1;
            }
        }
        sums.push(s);
    }
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let stderr = if sums.len() > 1 {
        let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        math::sqrt(var / n)
    } else {
        0.0
    };
    Ok(CampbellEstimate {
        mean,
        stderr,
        paths: paths.len(),
        jumps,
    })
}

/// Campbell estimate plus the gradient of its mean for a tabular model.
pub fn campbell_loss_and_grad(
    model: &TabularDenoiser,
    paths: &[JumpPath],
    window: Option<(f64, f64)>,
    grad: &mut [f64],
) -> Result<CampbellEstimate, ObjectiveError> {
    window_ok(window)?;
    if model.role() != Role::Jump {
        return Err(ObjectiveError::BadBatch {
            reason: "campbell gradients need a Jump-role model",
        });
    }
    if paths.is_empty() {
        return Err(ObjectiveError::BadBatch {
            reason: "campbell batch is empty",
        });
    }
    let w = 1.0 / paths.len() as f64;
    let mut sums = Vec::with_capacity(paths.len());
    let mut jumps = 0usize;
    for path in paths {
        let mut s = 0.0;
        for (time, from, to) in path.true_jumps() {
            if in_window(time, window) {
                s += model.nll_and_grad_weighted(to, time, from, w, grad) / w;
                jumps += 1;
            }
        }
        sums.push(s);
    }
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let stderr = if sums.len() > 1 {
        let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        math::sqrt(var / n)
    } else {
        0.0
    };
    Ok(CampbellEstimate {
        mean,
        stderr,
        paths: paths.len(),
        jumps,
    })
}

/// Predictor of the clean token from the enumerable statistic of an
/// absorbing forward path: the pre-mask token and the first uniformization
/// epoch time (`1.0` when the path has no epoch).
pub trait PathPredictor {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn path_predict_into(&self, pre_mask: u32, epoch_time: f64, out: &mut [f64]);
    fn log_path_predict_into(&self, pre_mask: u32, epoch_time: f64, out: &mut [f64]) {
        self.path_predict_into(pre_mask, epoch_time, out);
        for v in out.iter_mut() {
            *v = math::ln(v.max(1e-300));
        }
    }
}

/// The calibrated path predictor: for an absorbing kernel the path
/// determines the clean token exactly.
#[derive(Debug, Clone, Copy)]
pub struct ExactPathPredictor {
    pub m: usize,
}

impl PathPredictor for ExactPathPredictor {
    fn len(&self) -> usize {
        self.m
    }

    fn path_predict_into(&self, pre_mask: u32, _epoch_time: f64, out: &mut [f64]) {
        out.fill(0.0);
        out[pre_mask as usize] = 1.0;
    }
}

/// A tabular table doubles as a path predictor: input token = pre-mask
/// token, time = first epoch time.  Any role is accepted since this usage
/// is outside the Mean/Jump dichotomy.
impl PathPredictor for TabularDenoiser {
    fn len(&self) -> usize {
        TabularDenoiser::len(self)
    }

    fn path_predict_into(&self, pre_mask: u32, epoch_time: f64, out: &mut [f64]) {
        self.predict_into(pre_mask, epoch_time, out);
    }

    fn log_path_predict_into(&self, pre_mask: u32, epoch_time: f64, out: &mut [f64]) {
        self.log_predict_into(pre_mask, epoch_time, out);
    }
}

/// Decomposition of the snapshot-vs-path NLL difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// Snapshot NLL minus path NLL.
    pub delta_nll: f64,
    /// Information path gap: conditional entropy of the clean token given a
    /// snapshot (the path determines the token, so its entropy term is
    /// zero).
    pub ipg: f64,
    /// Calibration gap: snapshot calibration minus path calibration.
    pub cg: f64,
    pub cal_snapshot: f64,
    pub cal_path: f64,
}

/// Exact information/calibration decomposition for an absorbing kernel.
/// All five numbers are accumulated on the same quadrature nodes through
/// different groupings, so `delta_nll = ipg + cg` holds to rounding when
/// the bookkeeping is right; the first epoch of a path is the sufficient
/// statistic, with its no-epoch atom handled separately.
pub fn nll_gap_report(
    kern: &JumpKernel,
    sched: &Schedule,
    qdata: &DataDistribution,
    snap: &impl MeanModel,
    path: &impl PathPredictor,
    rule: &Quadrature,
) -> Result<GapReport, ObjectiveError> {
    let mask = match kern {
        JumpKernel::Absorb { mask, .. } => *mask as usize,
        _ => {
            return Err(ObjectiveError::Unsupported {
                reason: "the gap report requires an absorbing kernel",
            })
        }
    };
    let m = kern.len();
    if qdata.len() != m || snap.len() != m || path.len() != m {
        return Err(ObjectiveError::BadBatch {
            reason: "vocabulary sizes disagree",
        });
    }
    let mut lp_mask = vec![0.0; m];
    let mut lp_tok = vec![0.0; m];
    let mut lp_path = vec![0.0; m];
    let mut post = vec![0.0; m];
    let mut e_snap = 0.0;
    let mut e_path = 0.0;
    let mut h_snap = 0.0;
    let mut cal_snap = 0.0;
    let mut cal_path = 0.0;
    for (t, w) in rule.points() {
        let alpha = sched.alpha(t)?;
        let dens = sched.exit_rate(t)? * alpha; // first-epoch density
        snap.log_mean_into(mask as u32, t, &mut lp_mask);
        // Posterior behind a masked snapshot and its total probability.
        let mut p_masked = 0.0;
        for x0 in 0..m {
            let q = qdata.probs()[x0];
            post[x0] = q * if x0 == mask { 1.0 } else { 1.0 - alpha };
            p_masked += post[x0];
        }
        if p_masked > 0.0 {
            for p in post.iter_mut() {
                *p /= p_masked;
            }
        }
        let mut node_snap = 0.0;
        let mut node_path = 0.0;
        let mut node_cal_snap = 0.0;
        let mut node_cal_path = 0.0;
        let mut node_h = 0.0;
        for x0 in 0..m {
            let q = qdata.probs()[x0];
            if q == 0.0 {
                continue;
            }
            path.log_path_predict_into(x0 as u32, t, &mut lp_path);
            let nll_path = -lp_path[x0];
            node_path += q * nll_path;
            node_cal_path += q * nll_path; // KL from a point mass
            if x0 == mask {
                // A masked clean token is already absorbed.
                node_snap += q * (-lp_mask[mask]);
            } else {
                snap.log_mean_into(x0 as u32, t, &mut lp_tok);
                node_snap += q * (alpha * (-lp_tok[x0]) + (1.0 - alpha) * (-lp_mask[x0]));
                // Unmasked snapshots identify the token: KL from a point
                // mass at x0.
                node_cal_snap += q * alpha * (-lp_tok[x0]);
            }
        }
        for (x0, &p) in post.iter().enumerate() {
            if p > 0.0 {
                node_h -= p_masked * p * math::ln(p);
                node_cal_snap += p_masked * p * (math::ln(p) - lp_mask[x0]);
            }
        }
        e_snap += w * node_snap;
        h_snap += w * node_h;
        cal_snap += w * node_cal_snap;
        e_path += w * dens * node_path;
        cal_path += w * dens * node_cal_path;
    }
    // Paths with no epoch by t = 1: the token is read off directly; the
    // predictor is queried at the sentinel time 1.0.
    let atom = sched.alpha(1.0)?;
    if atom > 0.0 {
        for x0 in 0..m {
            let q = qdata.probs()[x0];
            if q == 0.0 {
                continue;
            }
            path.log_path_predict_into(x0 as u32, 1.0, &mut lp_path);
            e_path += atom * q * (-lp_path[x0]);
            cal_path += atom * q * (-lp_path[x0]);
        }
    }
    Ok(GapReport {
        delta_nll: e_snap - e_path,
        ipg: h_snap,
        cg: cal_snap - cal_path,
        cal_snapshot: cal_snap,
        cal_path,
    })
}
