use super::{objective, AllocationProblem, BitAllocation, ResourceConstraint};
use crate::error::{Error, Result};
use crate::par::Exec;

pub const BRUTE_FORCE_MAX_QUANTIZERS: usize = 6;
pub const BRUTE_FORCE_MAX_BITS_SPAN: u32 = 6;

/// Exhaustive search over integer allocations in the box. Returns a minimizer;
/// among equal objectives the lexicographically smallest bit vector wins.
pub fn brute_force(
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<BitAllocation> {
    brute_force_with(Exec::default(), problem, constraint)
}

pub fn brute_force_with(
    exec: Exec,
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
) -> Result<BitAllocation> {
    constraint.validate()?;
    let (b_min, b_max) = constraint.bounds();
    let k = problem.len();
    if k > BRUTE_FORCE_MAX_QUANTIZERS || b_max - b_min > BRUTE_FORCE_MAX_BITS_SPAN {
        return Err(Error::contract(format!(
            "brute force limited to {BRUTE_FORCE_MAX_QUANTIZERS} quantizers and a span of \
             {BRUTE_FORCE_MAX_BITS_SPAN} bits, got {k} and {}",
            b_max - b_min
        )));
    }
    let levels = (b_max - b_min + 1) as usize;
    let groups = constraint.groups(problem);
    let budgets: Vec<i64> = groups.iter().map(|g| g.integer_budget()).collect();

    // split on the first coordinate; each worker enumerates the rest in lexicographic order
    let partial = exec.map_range(levels, |first| {
        let mut digits = vec![0usize; k];
        digits[0] = first;
        let mut best: Option<(f64, Vec<f64>)> = None;
        loop {
            let bits: Vec<f64> = digits
                .iter()
                .map(|&d| (b_min as usize + d) as f64)
                .collect();
            let feasible = groups.iter().zip(&budgets).all(|(g, &budget)| {
                let used: i64 = g
                    .members
                    .iter()
                    .zip(&g.costs)
                    .map(|(&i, &c)| bits[i] as i64 * c as i64)
                    .sum();
                used <= budget
            });
            if feasible {
                let alloc = BitAllocation {
                    ids: problem.ids.clone(),
                    bits,
                    integral: true,
                };
                let value = objective(&alloc, problem).expect("same ids");
                if best.as_ref().is_none_or(|(v, _)| value < *v) {
                    best = Some((value, alloc.bits));
                }
            }
            // odometer over positions 1..k, last position fastest
            let mut pos = k;
            loop {
                if pos <= 1 {
                    return best;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < levels {
                    break;
                }
                digits[pos] = 0;
            }
        }
    });

    let mut best: Option<(f64, Vec<f64>)> = None;
    for (value, bits) in partial.into_iter().flatten() {
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, bits));
        }
    }
    let (_, bits) = best.ok_or_else(|| {
        Error::Constraint("no integer allocation satisfies the constraint".into())
    })?;
    Ok(BitAllocation {
        ids: problem.ids.clone(),
        bits,
        integral: true,
    })
}
