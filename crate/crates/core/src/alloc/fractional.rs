use std::f64::consts::LN_2;

use super::{AllocationProblem, BitAllocation, Group, ResourceConstraint};
use crate::error::{Error, Result};

const OUTER_ITERS: usize = 2200;
const INNER_ITERS: usize = 80;
const RESIDUAL_TOL: f64 = 1e-6;
const MAX_DOUBLINGS: usize = 2048;

/// Relaxed allocation together with the budget multiplier of each group.
#[derive(Clone, Debug, PartialEq)]
pub struct FractionalSolution {
    pub allocation: BitAllocation,
    /// Multiplier of the group each quantizer belongs to.
    pub multipliers: Vec<f64>,
}

/// Convex relaxation with real-valued bitwidths.
pub fn fractional_solve(
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<BitAllocation> {
    fractional_solve_with_duals(problem, constraint).map(|s| s.allocation)
}

/// Solves `min sum A_q (2^b_q - 1)^-2  s.t.  sum w_q b_q <= W,  b_min <= b <= b_max`
/// per group by bisection on the budget multiplier. Each multiplier value
/// decouples into one-dimensional problems solved on their stationarity
/// condition. The returned point never overspends its group budget.
pub fn fractional_solve_with_duals(
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<FractionalSolution> {
    constraint.validate()?;
    let (b_min, b_max) = constraint.bounds();
    let (lo, hi) = (b_min as f64, b_max as f64);
    let mut bits = vec![lo; problem.len()];
    let mut multipliers = vec![0.0; problem.len()];
    for group in constraint.groups(problem) {
        let lambda = solve_group(problem, &group, lo, hi, &mut bits)?;
        for &i in &group.members {
            multipliers[i] = lambda;
        }
    }
    Ok(FractionalSolution {
        allocation: BitAllocation {
            ids: problem.ids.clone(),
            bits,
            integral: false,
        },
        multipliers,
    })
}

/// `-d/db [A (2^b - 1)^-2]`, positive and decreasing in `b`.
fn neg_slope(weight: f64, b: f64) -> f64 {
    let p = b.exp2();
    let levels = p - 1.0;
    2.0 * weight * LN_2 * p / (levels * levels * levels)
}

/// Minimizer of `A (2^b - 1)^-2 + price * b` over `[lo, hi]`.
fn best_response(weight: f64, price: f64, lo: f64, hi: f64) -> f64 {
    if weight == 0.0 || neg_slope(weight, lo) <= price {
        return lo;
    }
    if neg_slope(weight, hi) >= price {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..INNER_ITERS {
        let mid = 0.5 * (a + b);
        if neg_slope(weight, mid) > price {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

fn solve_group(
    problem: &AllocationProblem,
    group: &Group,
    lo: f64,
    hi: f64,
    bits: &mut [f64],
) -> Result<f64> {
    let costs: Vec<f64> = group.costs.iter().map(|&c| c as f64).collect();
    let budget = group.real_budget();
    let weights: Vec<f64> = group.members.iter().map(|&i| problem.weights[i]).collect();

    let respond = |lambda: f64, out: &mut Vec<f64>| -> f64 {
        out.clear();
        let mut used = 0.0;
        for (&w, &c) in weights.iter().zip(&costs) {
            let b = if lambda == 0.0 {
                if w > 0.0 {
                    hi
                } else {
                    lo
                }
            } else {
                best_response(w, lambda * c, lo, hi)
            };
            used += c * b;
            out.push(b);
        }
        used
    };

    let mut point = Vec::with_capacity(weights.len());
    if respond(0.0, &mut point) <= budget {
        // Budget does not bind for the sensitive quantizers; any split of the
        // remainder among zero-weight quantizers is optimal, so level them.
        spread_remainder(&weights, &costs, budget, lo, hi, &mut point);
        for (&i, &b) in group.members.iter().zip(&point) {
            bits[i] = b;
        }
        return Ok(0.0);
    }

    let mut lambda_hi = 1.0;
    let mut doublings = 0;
    while respond(lambda_hi, &mut point) > budget {
        lambda_hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS || !lambda_hi.is_finite() {
            return Err(Error::numeric(
                "fractional solve: could not bracket the multiplier",
            ));
        }
    }
    // Bisect until the bracket stops shrinking; the residual test below only
    // guards against a bracket that never tightened.
    let mut lambda_lo = 0.0;
    for _ in 0..OUTER_ITERS {
        let mid = 0.5 * (lambda_lo + lambda_hi);
        if mid <= lambda_lo || mid >= lambda_hi {
            break;
        }
        if respond(mid, &mut point) > budget {
            lambda_lo = mid;
        } else {
            lambda_hi = mid;
        }
    }
    let used_hi = respond(lambda_hi, &mut point);
    if (budget - used_hi).abs() > RESIDUAL_TOL * budget {
        return Err(Error::numeric(format!(
            "fractional solve did not converge: budget {budget}, used {used_hi}, residual {}",
            (budget - used_hi).abs()
        )));
    }
    for (&i, &b) in group.members.iter().zip(&point) {
        bits[i] = b;
    }
    Ok(lambda_hi)
}

/// Raises zero-weight entries to a common level so the group uses `budget`.
fn spread_remainder(
    weights: &[f64],
    costs: &[f64],
    budget: f64,
    lo: f64,
    hi: f64,
    point: &mut [f64],
) {
    let fixed: f64 = weights
        .iter()
        .zip(costs)
        .zip(point.iter())
        .filter(|((w, _), _)| **w > 0.0)
        .map(|((_, c), b)| c * b)
        .sum();
    let idle: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] == 0.0).collect();
    if idle.is_empty() {
        return;
    }
    let used_at = |level: f64| -> f64 {
        fixed
            + idle
                .iter()
                .map(|&i| costs[i] * level.clamp(lo, hi))
                .sum::<f64>()
    };
    let (mut a, mut b) = (lo, hi);
    if used_at(hi) <= budget {
        a = hi;
    } else {
        for _ in 0..INNER_ITERS {
            let mid = 0.5 * (a + b);
            if used_at(mid) <= budget {
                a = mid;
            } else {
                b = mid;
            }
        }
    }
    for &i in &idle {
        point[i] = a;
    }
}
