use log::warn;

use super::{
    marginal_gain, noise_term, AllocationProblem, BitAllocation, Group, ResourceConstraint,
};
use crate::error::{Error, Result};

/// Which quantizer receives the next bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GreedyRule {
    /// Largest decrease of the objective per unit of budget.
    #[default]
    MarginalGain,
    /// Smallest current noise term `A_q / (2^b_q - 1)^2`. Upgrades the least
    /// sensitive quantizer first; kept only for comparison.
    LiteralArgmin,
}

/// Greedy single-bit upgrades from `b_min` until the budget is spent.
///
/// Under an average-bitwidth constraint the marginal gains shrink with every
/// bit, so the greedy result is optimal among integer allocations. Under the
/// element-weighted constraint each upgrade costs `e_q` budget units and the
/// result is a heuristic.
pub fn greedy_integer(
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<BitAllocation> {
    greedy_integer_with_rule(problem, constraint, GreedyRule::MarginalGain)
}

pub fn greedy_integer_with_rule(
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
    rule: GreedyRule,
) -> Result<BitAllocation> {
    constraint.validate()?;
    let (b_min, b_max) = constraint.bounds();
    let mut bits = vec![b_min as f64; problem.len()];
    for group in constraint.groups(problem) {
        let budget = group.integer_budget();
        let floor: i64 = group.total_cost() as i64 * b_min as i64;
        let spare = budget - floor;
        if spare < 0 {
            return Err(Error::Constraint(format!(
                "budget of {budget} bit-units is below the floor of {floor}"
            )));
        }
        let ceiling = group.total_cost() as i64 * b_max as i64;
        if budget > ceiling {
            return Err(Error::Constraint(format!(
                "budget of {budget} bit-units exceeds the ceiling of {ceiling}"
            )));
        }
        if group.costs.iter().all(|&c| c == 1)
            && group.total_cost() as f64 * group.beta != budget as f64
        {
            warn!(
                "target {} does not give an integral budget for {} quantizers; using {budget}",
                group.beta,
                group.members.len()
            );
        }
        fill(problem, &group, &mut bits, spare, b_max, rule);
    }
    Ok(BitAllocation {
        ids: problem.ids.clone(),
        bits,
        integral: true,
    })
}

/// Spends up to `spare` budget units on single-bit upgrades within `group`.
/// Returns the unspent remainder.
fn fill(
    problem: &AllocationProblem,
    group: &Group,
    bits: &mut [f64],
    mut spare: i64,
    b_max: u32,
    rule: GreedyRule,
) -> i64 {
    loop {
        let mut best: Option<(usize, f64, f64)> = None;
        for (pos, (&i, &cost)) in group.members.iter().zip(&group.costs).enumerate() {
            if bits[i] >= b_max as f64 || cost as i64 > spare {
                continue;
            }
            let score = match rule {
                GreedyRule::MarginalGain => {
                    marginal_gain(problem.weights[i], bits[i]) / cost as f64
                }
                GreedyRule::LiteralArgmin => -(problem.weights[i] * noise_term(bits[i])),
            };
            // Exact ties go to the quantizer with fewer bits (this keeps equal
            // weights, including all-zero ones, level), then to the lowest index.
            let level = -bits[i];
            if best.is_none_or(|(_, s, l)| score > s || (score == s && level > l)) {
                best = Some((pos, score, level));
            }
        }
        let Some((pos, _, _)) = best else {
            return spare;
        };
        bits[group.members[pos]] += 1.0;
        spare -= group.costs[pos] as i64;
    }
}

/// Single-bit downgrades with the smallest objective increase per budget unit
/// until `spare` is non-negative. `None` when everything is already at `b_min`.
fn shed(
    problem: &AllocationProblem,
    group: &Group,
    bits: &mut [f64],
    mut spare: i64,
    b_min: u32,
) -> Option<i64> {
    while spare < 0 {
        let mut best: Option<(usize, f64)> = None;
        for (pos, (&i, &cost)) in group.members.iter().zip(&group.costs).enumerate() {
            if bits[i] <= b_min as f64 {
                continue;
            }
            let loss = marginal_gain(problem.weights[i], bits[i] - 1.0) / cost as f64;
            if best.is_none_or(|(_, l)| loss < l) {
                best = Some((pos, loss));
            }
        }
        let (pos, _) = best?;
        bits[group.members[pos]] -= 1.0;
        spare += group.costs[pos] as i64;
    }
    Some(spare)
}

/// Projects a fractional allocation onto integers: floor every entry (not
/// below `b_min`), then hand the reclaimed budget back greedily. A floored
/// point that still overspends the exact integer budget gives up its cheapest
/// bits first.
pub fn round_to_integer(
    frac: &BitAllocation,
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<BitAllocation> {
    constraint.validate()?;
    if frac.ids != problem.ids {
        return Err(Error::contract(
            "allocation and problem cover different quantizers",
        ));
    }
    let (b_min, b_max) = constraint.bounds();
    let mut bits: Vec<f64> = frac
        .bits
        .iter()
        .map(|b| b.floor().clamp(b_min as f64, b_max as f64))
        .collect();
    for group in constraint.groups(problem) {
        let used: i64 = group
            .members
            .iter()
            .zip(&group.costs)
            .map(|(&i, &c)| bits[i] as i64 * c as i64)
            .sum();
        let mut spare = group.integer_budget() - used;
        if spare < 0 {
            // The relaxed point meets the budget as a product of doubles, which
            // can round up past the exact integer budget.
            spare = shed(problem, &group, &mut bits, spare, b_min).ok_or_else(|| {
                Error::Constraint(format!(
                    "floored allocation uses {used} bit-units, budget is {}",
                    group.integer_budget()
                ))
            })?;
        }
        fill(
            problem,
            &group,
            &mut bits,
            spare,
            b_max,
            GreedyRule::MarginalGain,
        );
    }
    Ok(BitAllocation {
        ids: problem.ids.clone(),
        bits,
        integral: true,
    })
}
