//! Bitwidth allocation under resource constraints.
//!
//! Every solver minimizes the separable surrogate
//! `sum_q A_q / (2^b_q - 1)^2`, where `A_q` is a quantizer's range-weighted
//! sensitivity, subject to either a plain average-bitwidth budget or
//! element-weighted averages applied separately to weights and activations.

mod brute;
mod fractional;
mod greedy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantizerId, Role};

pub use brute::{
    brute_force, brute_force_with, BRUTE_FORCE_MAX_BITS_SPAN, BRUTE_FORCE_MAX_QUANTIZERS,
};
pub use fractional::{fractional_solve, fractional_solve_with_duals, FractionalSolution};
pub use greedy::{greedy_integer, greedy_integer_with_rule, round_to_integer, GreedyRule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResourceConstraint {
    /// Mean bitwidth over all quantizers at most `beta`.
    AvgBitwidth { beta: f64, b_min: u32, b_max: u32 },
    /// Element-weighted mean bitwidth at most `beta_weight` over weight
    /// quantizers and at most `beta_act` over activation quantizers.
    PerElementAvg {
        beta_weight: f64,
        beta_act: f64,
        b_min: u32,
        b_max: u32,
    },
}

impl ResourceConstraint {
    pub fn avg(beta: f64, b_min: u32, b_max: u32) -> Result<Self> {
        let c = ResourceConstraint::AvgBitwidth { beta, b_min, b_max };
        c.validate()?;
        Ok(c)
    }

    pub fn per_element(beta_weight: f64, beta_act: f64, b_min: u32, b_max: u32) -> Result<Self> {
        let c = ResourceConstraint::PerElementAvg {
            beta_weight,
            beta_act,
            b_min,
            b_max,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn bounds(&self) -> (u32, u32) {
        match *self {
            ResourceConstraint::AvgBitwidth { b_min, b_max, .. }
            | ResourceConstraint::PerElementAvg { b_min, b_max, .. } => (b_min, b_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b_min, b_max) = self.bounds();
        if b_min < 1 || b_min > b_max {
            return Err(Error::Constraint(format!(
                "bit range [{b_min}, {b_max}] is invalid"
            )));
        }
        let betas: &[f64] = match self {
            ResourceConstraint::AvgBitwidth { beta, .. } => &[*beta],
            ResourceConstraint::PerElementAvg {
                beta_weight,
                beta_act,
                ..
            } => &[*beta_weight, *beta_act],
        };
        for &beta in betas {
            if !(beta >= b_min as f64 && beta <= b_max as f64) {
                return Err(Error::Constraint(format!(
                    "target average {beta} outside [{b_min}, {b_max}]"
                )));
            }
        }
        Ok(())
    }

    /// Independent budget groups as `(member indices, per-member cost, target average)`.
    pub(crate) fn groups(&self, problem: &AllocationProblem) -> Vec<Group> {
        match *self {
            ResourceConstraint::AvgBitwidth { beta, .. } => vec![Group {
                members: (0..problem.len()).collect(),
                costs: vec![1; problem.len()],
                beta,
            }],
            ResourceConstraint::PerElementAvg {
                beta_weight,
                beta_act,
                ..
            } => [(Role::Weight, beta_weight), (Role::Activation, beta_act)]
                .into_iter()
                .filter_map(|(role, beta)| {
                    let members: Vec<usize> = (0..problem.len())
                        .filter(|&i| problem.roles[i] == role)
                        .collect();
                    (!members.is_empty()).then(|| Group {
                        costs: members.iter().map(|&i| problem.elements[i]).collect(),
                        members,
                        beta,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Group {
    pub members: Vec<usize>,
    pub costs: Vec<u64>,
    pub beta: f64,
}

impl Group {
    pub fn total_cost(&self) -> u64 {
        self.costs.iter().sum()
    }

    /// Largest integer `n` with `n <= beta * total_cost`, decided exactly.
    pub fn integer_budget(&self) -> i64 {
        let total = self.total_cost() as f64;
        let mut n = (total * self.beta).floor() as i64;
        // fused multiply-add gives the sign of beta*total - n without rounding error
        while total.mul_add(self.beta, -((n + 1) as f64)) >= 0.0 {
            n += 1;
        }
        while total.mul_add(self.beta, -(n as f64)) < 0.0 {
            n -= 1;
        }
        n
    }

    pub fn real_budget(&self) -> f64 {
        self.beta * self.total_cost() as f64
    }
}

/// Per-quantizer data for one allocation. Entries are kept in ascending id
/// order, which is also the tie-breaking order of every solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub ids: Vec<QuantizerId>,
    /// Range-weighted sensitivities `A_q`.
    pub weights: Vec<f64>,
    pub roles: Vec<Role>,
    pub elements: Vec<u64>,
}

impl AllocationProblem {
    pub fn new(
        ids: Vec<QuantizerId>,
        weights: Vec<f64>,
        roles: Vec<Role>,
        elements: Vec<u64>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::contract(
                "allocation problem needs at least one quantizer",
            ));
        }
        if weights.len() != n || roles.len() != n || elements.len() != n {
            return Err(Error::contract(
                "allocation problem fields have mismatched lengths",
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::contract(format!(
                "sensitivity weight {w} must be finite and >= 0"
            )));
        }
        if elements.contains(&0) {
            return Err(Error::contract("element counts must be positive"));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(
                "quantizer ids must be unique and ascending",
            ));
        }
        Ok(Self {
            ids,
            weights,
            roles,
            elements,
        })
    }

    /// Problem with every quantizer in the weight role and unit element counts.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        Self::new(
            (0..n as u32).map(QuantizerId).collect(),
            weights,
            vec![Role::Weight; n],
            vec![1; n],
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * c).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub ids: Vec<QuantizerId>,
    pub bits: Vec<f64>,
    pub integral: bool,
}

impl BitAllocation {
    pub fn uniform(ids: Vec<QuantizerId>, bits: f64) -> Self {
        let n = ids.len();
        Self {
            ids,
            bits: vec![bits; n],
            integral: bits.fract() == 0.0,
        }
    }

    pub fn average_bits(&self) -> f64 {
        self.bits.iter().sum::<f64>() / self.bits.len() as f64
    }

    pub fn distinct_bitwidths(&self) -> usize {
        let mut b = self.bits.clone();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b.len()
    }
}

/// `1 / (2^b - 1)^2`, the per-unit-weight noise term of a quantizer.
#[inline]
pub fn noise_term(bits: f64) -> f64 {
    let levels = bits.exp2() - 1.0;
    1.0 / (levels * levels)
}

/// Decrease of `A / (2^b - 1)^2` when `b` grows by one bit.
#[inline]
pub fn marginal_gain(weight: f64, bits: f64) -> f64 {
    weight * (noise_term(bits) - noise_term(bits + 1.0))
}

/// `sum_q A_q / (2^b_q - 1)^2`.
pub fn objective(alloc: &BitAllocation, problem: &AllocationProblem) -> Result<f64> {
    if alloc.ids != problem.ids {
        return Err(Error::contract(
            "allocation and problem cover different quantizers",
        ));
    }
    Ok(problem
        .weights
        .iter()
        .zip(&alloc.bits)
        .map(|(&a, &b)| a * noise_term(b))
        .sum())
}

/// Exact constraint check for integer allocations; fractional allocations are
/// accepted within `rel_tol` of each group budget.
pub fn satisfies(
    alloc: &BitAllocation,
    problem: &AllocationProblem,
    constraint: &ResourceConstraint,
    rel_tol: f64,
) -> bool {
    let (b_min, b_max) = constraint.bounds();
    if alloc.ids != problem.ids
        || alloc
            .bits
            .iter()
            .any(|&b| !(b >= b_min as f64 && b <= b_max as f64))
    {
        return false;
    }
    constraint.groups(problem).iter().all(|g| {
        if alloc.integral {
            let used: i64 = g
                .members
                .iter()
                .zip(&g.costs)
                .map(|(&i, &c)| alloc.bits[i] as i64 * c as i64)
                .sum();
            used <= g.integer_budget()
        } else {
            let used: f64 = g
                .members
                .iter()
                .zip(&g.costs)
                .map(|(&i, &c)| alloc.bits[i] * c as f64)
                .sum();
            used <= g.real_budget() * (1.0 + rel_tol)
        }
    })
}
