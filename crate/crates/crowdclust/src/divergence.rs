//! Information-theoretic quantities governing cluster recovery error.
//!
//! For an admissible model, the misclassification probability of item `i`
//! under uniform (list, question) selection decays like
//! `exp(-(Tw/n) * D_U(i))`, where `D_U(i)` is a per-item divergence; under the
//! best adaptive selection the average error decays like
//! `exp(-(Tw/n) * D_A~)`, where `D_A~` maximizes a concave allocation
//! objective. This module computes all of these, the sandwich bounds on
//! `D_U(i)`, and the induced error lower-bound curves. The `(1 + o(1))`
//! factors of the asymptotic statements are dropped; every curve emitted here
//! is the asymptotic exponent evaluated at finite `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mix_prob, Model};
use crate::scalar::Real;

/// Lower clamp applied to the second KL argument (empirical rates can hit 0/1).
const KL_CLAMP: f64 = 1e-12;
/// Argument tolerance for 1-D golden-section minimizations.
const GOLDEN_TOL: f64 = 1e-9;
/// Iteration cap for golden-section search.
const GOLDEN_ITERS: usize = 200;
/// Duality-gap tolerance for the conditional-gradient solver.
const FW_GAP_TOL: f64 = 1e-6;
/// Iteration cap for the conditional-gradient solver.
const FW_MAX_ITERS: usize = 2000;

/// Kullback-Leibler divergence between Bernoulli distributions of means `a`
/// and `b`, with `0 log 0 = 0` and `b` clamped into `[1e-12, 1 - 1e-12]`.
pub fn kl_bernoulli<F: Real>(a: F, b: F) -> F {
    let eps = F::of(KL_CLAMP);
    let b = b.max(eps).min(F::one() - eps);
    let mut out = F::zero();
    if a > F::zero() {
        out = out + a * (a / b).ln();
    }
    let a_bar = F::one() - a;
    if a_bar > F::zero() {
        out = out + a_bar * (a_bar / (F::one() - b)).ln();
    }
    // guard against -0.0 / rounding just below zero at a == b
    out.max(F::zero())
}

/// Golden-section search for the minimum of a unimodal `f` on `[lo, hi]`.
///
/// Returns `(argmin, f(argmin))`; the argument is resolved to `1e-9` or until
/// the iteration cap. Degenerate intervals return the left endpoint.
pub fn golden_section_min<F: Real>(f: impl Fn(F) -> F, lo: F, hi: F) -> (F, F) {
    if hi <= lo {
        return (lo, f(lo));
    }
    let tol = F::of(GOLDEN_TOL);
    let phi = F::of(0.618_033_988_749_894_9);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..GOLDEN_ITERS {
        if b - a <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let x = (a + b) / F::of(2.0);
    (x, f(x))
}

/// Aggregates per-item divergences into the global exponent
/// `-(1/beta) * log((1/n) * sum_i exp(-beta * d_i))`, computed with a
/// log-sum-exp shift.
pub(crate) fn log_mean_exp_aggregate<F: Real>(divs: &[F], beta: F) -> F {
    assert!(!divs.is_empty());
    let m = divs.iter().copied().fold(F::infinity(), F::min);
    let n = F::of_usize(divs.len());
    let sum: F = divs.iter().map(|&d| (-beta * (d - m)).exp()).sum();
    m - (sum / n).ln() / beta
}

/// Per-item divergence under uniform selection, with its minimizers and the
/// sandwich bounds evaluated at the minimizing cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformDivergence<F> {
    /// `D_U(i)`.
    pub value: F,
    /// The cluster `k'` achieving the outer minimum.
    pub argmin_cluster: usize,
    /// The hardness `h'` achieving the inner minimum, in `[(h*+1)/2, 1]`.
    pub argmin_hardness: F,
    /// `(2h_i-1)^2 / (2L) * min_c ||c r_{k'} - r_{sigma(i)}||_2^2`.
    pub lower_bound: F,
    /// Same expression scaled by `1/eta`.
    pub upper_bound: F,
}

/// Computes `D_U(i) = min_{k' != sigma(i)} min_{h' in [(h*+1)/2, 1]}
/// (1/L) sum_l KL(h' p_{k'l} + (1-h')(1-p_{k'l}), q_{il})`.
///
/// Errors when `h* <= 0` (an item answers at random and the hardness range
/// for the alternative collapses).
pub fn divergence_uniform<F: Real>(model: &Model<F>, item: usize) -> Result<UniformDivergence<F>> {
    check_item(model, item)?;
    let h_star = model.h_star();
    if h_star <= F::zero() {
        return Err(Error::Assumption(format!(
            "D_U requires h* > 0, got h* = {h_star}"
        )));
    }
    let lo = (h_star + F::one()) / F::of(2.0);
    let hi = F::one();
    let q_i = model.answer_prob_row(item);
    let l_count = F::of_usize(model.num_questions());

    let mut best: Option<(F, usize, F)> = None;
    for k_prime in 0..model.num_clusters() {
        if k_prime == model.cluster_of(item) {
            continue;
        }
        let objective = |h: F| -> F {
            let mut sum = F::zero();
            for (l, &q) in q_i.iter().enumerate() {
                sum = sum + kl_bernoulli(mix_prob(h, model.p(k_prime, l)), q);
            }
            sum / l_count
        };
        let (h_min, val) = golden_section_min(objective, lo, hi);
        if best.is_none_or(|(v, _, _)| val < v) {
            best = Some((val, k_prime, h_min));
        }
    }
    let (value, argmin_cluster, argmin_hardness) = best.expect("model has at least two clusters");
    let (lower_bound, upper_bound) = divergence_uniform_bounds(model, item, argmin_cluster)?;
    Ok(UniformDivergence {
        value,
        argmin_cluster,
        argmin_hardness,
        lower_bound,
        upper_bound,
    })
}

/// Sandwich bounds on `D_U(i)` for a fixed alternative cluster `k'`:
///
/// `lower = (2h_i-1)^2/(2L) * min_c ||c r_{k'} - r_{sigma(i)}||_2^2` with `c`
/// ranging over `[h*, 1/h*]`, and `upper` the same expression scaled by
/// `1/eta` with `c` restricted to the scalings `(2h'-1)/(2h_i-1)` reachable
/// by an admissible alternative hardness `h' in [(h*+1)/2, 1]`, i.e.
/// `[h*/(2h_i-1), 1/(2h_i-1)]`. (The wider range is only valid on the lower
/// side; using it for the upper bound can undercut the true divergence.)
/// Each inner problem is a 1-D convex quadratic solved in closed form and
/// clamped to its range. With `h* = 0` the lower range is `[0, inf)`; with
/// `eta = 0` and a nonzero numerator the upper bound is infinite.
pub fn divergence_uniform_bounds<F: Real>(
    model: &Model<F>,
    item: usize,
    k_prime: usize,
) -> Result<(F, F)> {
    check_item(model, item)?;
    if k_prime >= model.num_clusters() || k_prime == model.cluster_of(item) {
        return Err(Error::Structure(format!(
            "k' = {k_prime} must name a cluster other than sigma({item})"
        )));
    }
    let a = model.r_row(k_prime);
    let b = model.r_row(model.cluster_of(item));
    let gain = F::of(2.0) * model.hardness(item) - F::one();
    if gain == F::zero() {
        return Ok((F::zero(), F::zero()));
    }
    let h_star = model.h_star();
    let (lo_full, hi_full) = if h_star > F::zero() {
        (h_star, F::one() / h_star)
    } else {
        (F::zero(), F::infinity())
    };
    let (lo_reach, hi_reach) = (h_star / gain, F::one() / gain);

    let min_sq = |c_lo: F, c_hi: F| -> F {
        let aa: F = a.iter().map(|&x| x * x).sum();
        let c = if aa == F::zero() {
            c_lo
        } else {
            let ab: F = a.iter().zip(&b).map(|(&x, &y)| x * y).sum();
            (ab / aa).max(c_lo).min(c_hi)
        };
        a.iter()
            .zip(&b)
            .map(|(&x, &y)| {
                let d = c * x - y;
                d * d
            })
            .sum()
    };
    let factor = gain * gain / (F::of(2.0) * F::of_usize(model.num_questions()));
    let lower = factor * min_sq(lo_full, hi_full);
    let upper_numerator = factor * min_sq(lo_reach, hi_reach);
    let upper = if upper_numerator == F::zero() {
        F::zero()
    } else {
        upper_numerator / model.eta()
    };
    Ok((lower, upper))
}

/// Global divergence under uniform selection:
/// `-(n/(Tw)) log((1/n) sum_i exp(-(Tw/n) D_U(i)))`.
pub fn global_divergence_uniform<F: Real>(model: &Model<F>, budget: u64, w: usize) -> Result<F> {
    check_budget(budget, w)?;
    let divs: Vec<F> = (0..model.num_items())
        .map(|i| divergence_uniform(model, i).map(|d| d.value))
        .collect::<Result<_>>()?;
    let beta = beta_factor(model.num_items(), budget, w);
    Ok(log_mean_exp_aggregate(&divs, beta))
}

/// Budget-share matrix `y` over items and questions: entries in `[0, 1]`
/// summing to `n`. `y_{il} * Tw/n` is the expected number of times question
/// `l` is asked for item `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation<F> {
    y: Vec<F>,
    items: usize,
    questions: usize,
}

impl<F: Real> Allocation<F> {
    /// Validates entry ranges and the total-mass constraint (`1e-9` absolute).
    pub fn new(y: Vec<F>, items: usize, questions: usize) -> Result<Self> {
        if y.len() != items * questions {
            return Err(Error::Structure(format!(
                "allocation has {} entries, expected {}",
                y.len(),
                items * questions
            )));
        }
        if y.iter()
            .any(|&v| v < F::zero() || v > F::one() || !v.is_finite())
        {
            return Err(Error::Structure(
                "allocation entries must lie in [0, 1]".into(),
            ));
        }
        let total: F = y.iter().copied().sum();
        if (total - F::of_usize(items)).abs() > F::of(1e-9) {
            return Err(Error::Structure(format!(
                "allocation mass {total} differs from n = {items}"
            )));
        }
        Ok(Self {
            y,
            items,
            questions,
        })
    }

    /// The uniform allocation `y_{il} = 1/L`.
    pub fn uniform(items: usize, questions: usize) -> Self {
        let v = F::one() / F::of_usize(questions);
        Self {
            y: vec![v; items * questions],
            items,
            questions,
        }
    }

    pub fn get(&self, item: usize, question: usize) -> F {
        self.y[item * self.questions + question]
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn questions(&self) -> usize {
        self.questions
    }

    pub fn as_slice(&self) -> &[F] {
        &self.y
    }
}

/// Per-item divergence under an allocation `y`:
/// `D_A(i, y) = min_{j: sigma(j) != sigma(i)} sum_l (y_{jl} KL(q_{jl}, q_{il})
/// + y_{il} KL(q_{il}, q_{jl}))`, with ties on `j` broken towards the smallest
/// id. Returns the value and the minimizing partner `j`.
pub fn divergence_adaptive<F: Real>(
    model: &Model<F>,
    item: usize,
    alloc: &Allocation<F>,
) -> Result<(F, usize)> {
    check_item(model, item)?;
    if alloc.items() != model.num_items() || alloc.questions() != model.num_questions() {
        return Err(Error::Structure(
            "allocation shape does not match the model".into(),
        ));
    }
    let q = all_answer_probs(model);
    Ok(divergence_adaptive_inner(model, &q, item, alloc.as_slice()))
}

fn divergence_adaptive_inner<F: Real>(
    model: &Model<F>,
    q: &[F],
    item: usize,
    y: &[F],
) -> (F, usize) {
    let l = model.num_questions();
    let mut best: Option<(F, usize)> = None;
    for j in 0..model.num_items() {
        if model.cluster_of(j) == model.cluster_of(item) {
            continue;
        }
        let mut sum = F::zero();
        for ql in 0..l {
            let q_i = q[item * l + ql];
            let q_j = q[j * l + ql];
            sum = sum
                + y[j * l + ql] * kl_bernoulli(q_j, q_i)
                + y[item * l + ql] * kl_bernoulli(q_i, q_j);
        }
        if best.is_none_or(|(v, _)| sum < v) {
            best = Some((sum, j));
        }
    }
    best.expect("model has at least two nonempty clusters")
}

/// Result of the concave allocation maximization defining the adaptive bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveDivergence<F> {
    /// `D_A(i, y*)` with the minimizing partner item per entry.
    pub per_item: Vec<(F, usize)>,
    /// The optimized global divergence `F(y*)`.
    pub global: F,
    /// The maximizing allocation.
    pub allocation: Allocation<F>,
    /// Objective value after every accepted step; non-decreasing.
    pub optimizer_trace: Vec<F>,
    /// False when the duality gap was still above tolerance at the iteration
    /// cap; the best iterate is returned either way.
    pub converged: bool,
}

/// Maximizes `F(y) = -(n/(Tw)) log((1/n) sum_i exp(-(Tw/n) D_A(i, y)))` over
/// allocations by conditional gradient.
///
/// Each step takes a supergradient of the concave objective, solves the
/// linear oracle over `{y in [0,1]^{n x L}: sum y = n}` by putting mass 1 on
/// the `n` largest gradient coordinates (ties towards the smallest flat
/// index), and moves with step `2/(s+2)`, halved until the objective does not
/// decrease. Stops when the duality gap drops below `1e-6` or after 2000
/// iterations.
pub fn global_divergence_adaptive<F: Real>(
    model: &Model<F>,
    budget: u64,
    w: usize,
) -> Result<AdaptiveDivergence<F>> {
    check_budget(budget, w)?;
    let n = model.num_items();
    let l = model.num_questions();
    let beta = beta_factor(n, budget, w);
    let q = all_answer_probs(model);

    let evaluate = |y: &[F]| -> (Vec<(F, usize)>, F) {
        let per_item: Vec<(F, usize)> = (0..n)
            .map(|i| divergence_adaptive_inner(model, &q, i, y))
            .collect();
        let divs: Vec<F> = per_item.iter().map(|&(v, _)| v).collect();
        let value = log_mean_exp_aggregate(&divs, beta);
        (per_item, value)
    };

    let mut y: Vec<F> = vec![F::one() / F::of_usize(l); n * l];
    let (mut per_item, mut value) = evaluate(&y);
    let mut trace = vec![value];
    let mut converged = false;

    for step in 0..FW_MAX_ITERS {
        // Supergradient: softmin weights over items times the active partner's
        // KL coefficients.
        let min_div = per_item.iter().map(|&(v, _)| v).fold(F::infinity(), F::min);
        let mut weights: Vec<F> = per_item
            .iter()
            .map(|&(v, _)| (-beta * (v - min_div)).exp())
            .collect();
        let wsum: F = weights.iter().copied().sum();
        for wi in &mut weights {
            *wi = *wi / wsum;
        }
        let mut grad = vec![F::zero(); n * l];
        for i in 0..n {
            let (_, j) = per_item[i];
            for ql in 0..l {
                let q_i = q[i * l + ql];
                let q_j = q[j * l + ql];
                grad[j * l + ql] = grad[j * l + ql] + weights[i] * kl_bernoulli(q_j, q_i);
                grad[i * l + ql] = grad[i * l + ql] + weights[i] * kl_bernoulli(q_i, q_j);
            }
        }

        // Linear oracle: mass 1 on the n largest gradient coordinates.
        let mut order: Vec<usize> = (0..n * l).collect();
        order.sort_by(|&a, &b| grad[b].partial_cmp(&grad[a]).unwrap().then(a.cmp(&b)));
        let mut vertex = vec![F::zero(); n * l];
        for &idx in order.iter().take(n) {
            vertex[idx] = F::one();
        }

        let gap: F = vertex
            .iter()
            .zip(&y)
            .zip(&grad)
            .map(|((&s, &yi), &g)| (s - yi) * g)
            .sum();
        if gap <= F::of(FW_GAP_TOL) {
            converged = true;
            break;
        }

        // Step with halving acceptance so the trace never decreases.
        let mut gamma = F::of(2.0) / F::of_usize(step + 2);
        let mut accepted = false;
        for _ in 0..50 {
            let candidate: Vec<F> = y
                .iter()
                .zip(&vertex)
                .map(|(&yi, &s)| yi + gamma * (s - yi))
                .collect();
            let (cand_items, cand_value) = evaluate(&candidate);
            if cand_value >= value {
                y = candidate;
                per_item = cand_items;
                value = cand_value;
                accepted = true;
                break;
            }
            gamma = gamma / F::of(2.0);
        }
        if !accepted {
            // stalled on a kink; the gap certificate above did not fire
            break;
        }
        trace.push(value);
    }

    Ok(AdaptiveDivergence {
        per_item,
        global: value,
        allocation: Allocation {
            y,
            items: n,
            questions: l,
        },
        optimizer_trace: trace,
        converged,
    })
}

/// Which lower-bound curve to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundKind {
    /// `exp(-(Tw/n) D_U(i))`.
    UniformPerItem { item: usize },
    /// `exp(-(Tw/n) D_U~)`.
    UniformGlobal,
    /// `exp(-(Tw/n) D_A~)`; runs the allocation optimizer.
    AdaptiveGlobal,
    /// The `L = 1, K = 2` closed form
    /// `exp(-(T/n) C (2h_i-1)^2 (p_1 - p_2)^2)`; `constant` defaults to
    /// `2/eta`.
    ClosedForm { item: usize, constant: Option<f64> },
}

/// Error-rate lower bound at finite budget, with the asymptotic correction
/// factor dropped.
pub fn error_lower_bound<F: Real>(
    model: &Model<F>,
    budget: u64,
    w: usize,
    kind: BoundKind,
) -> Result<F> {
    check_budget(budget, w)?;
    let beta: F = beta_factor(model.num_items(), budget, w);
    let bound = match kind {
        BoundKind::UniformPerItem { item } => {
            let d = divergence_uniform(model, item)?.value;
            (-beta * d).exp()
        }
        BoundKind::UniformGlobal => {
            let d = global_divergence_uniform(model, budget, w)?;
            (-beta * d).exp()
        }
        BoundKind::AdaptiveGlobal => {
            let d = global_divergence_adaptive(model, budget, w)?.global;
            (-beta * d).exp()
        }
        BoundKind::ClosedForm { item, constant } => {
            check_item(model, item)?;
            if model.num_questions() != 1 || model.num_clusters() != 2 {
                return Err(Error::Structure(
                    "the closed-form bound needs L = 1 and K = 2".into(),
                ));
            }
            let c = match constant {
                Some(c) => F::of(c),
                None => F::of(2.0) / model.eta(),
            };
            let gain = F::of(2.0) * model.hardness(item) - F::one();
            let dp = model.p(0, 0) - model.p(1, 0);
            let t_over_n = F::of(budget as f64) / F::of_usize(model.num_items());
            (-t_over_n * c * gain * gain * dp * dp).exp()
        }
    };
    Ok(bound.min(F::one()))
}

fn all_answer_probs<F: Real>(model: &Model<F>) -> Vec<F> {
    let l = model.num_questions();
    let mut q = Vec::with_capacity(model.num_items() * l);
    for i in 0..model.num_items() {
        for ql in 0..l {
            q.push(model.answer_prob(i, ql));
        }
    }
    q
}

fn beta_factor<F: Real>(n: usize, budget: u64, w: usize) -> F {
    F::of(budget as f64) * F::of_usize(w) / F::of_usize(n)
}

fn check_item<F: Real>(model: &Model<F>, item: usize) -> Result<()> {
    if item >= model.num_items() {
        return Err(Error::Structure(format!(
            "item {item} out of range for n = {}",
            model.num_items()
        )));
    }
    Ok(())
}

fn check_budget(budget: u64, w: usize) -> Result<()> {
    if budget == 0 || w == 0 {
        return Err(Error::Budget("T and w must be positive".into()));
    }
    Ok(())
}
