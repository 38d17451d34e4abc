//! The statistical feedback model.
//!
//! A model is a pair `(p, h)` together with a cluster map `sigma`: item `i` in
//! cluster `k` answers question `l` with `+1` with probability
//! `q_{il} = h_i * p_{kl} + (1 - h_i) * (1 - p_{kl})`. The hardness `h_i` lives
//! in `[1/2, 1]`: at `1/2` answers are pure noise, at `1` they follow the
//! cluster's answer profile exactly.
//!
//! Admissibility of a model is captured by two constants:
//! - `h* = min_i (2 h_i - 1)`, the minimum usable signal strength, and
//! - `rho* = min_{k != k'} min_{c in [0, 1/h*]} max_l |c r_{k'l} - r_{kl}|`
//!   with `r_{kl} = 2 p_{kl} - 1`, the minimum separation between scaled
//!   cluster signatures,
//!
//! plus the margin `eta = min_{k,l} min(p_{kl}, 1 - p_{kl})` keeping answer
//! probabilities away from 0 and 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;

/// Threshold above which the exact piecewise-linear minimization inside
/// [`rho_star`] switches to golden-section search.
const RHO_EXACT_MAX_QUESTIONS: usize = 64;

/// Ground-truth model instance.
///
/// Immutable after construction; cheap to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    n: usize,
    k: usize,
    l: usize,
    /// Row-major `K x L` answer matrix `p`.
    p: Vec<F>,
    /// Per-item hardness, length `n`, entries in `[1/2, 1]`.
    h: Vec<F>,
    /// Cluster of each item, 0-based, length `n`.
    sigma: Vec<usize>,
    /// Cluster fractions `alpha_k = |I_k| / n`.
    alpha: Vec<F>,
    /// Homogeneity margin `eta = min_{k,l} min(p, 1-p)`.
    eta: F,
}

impl<F: Real> Model<F> {
    /// Builds a model from the raw parameters, validating every structural
    /// invariant: shapes, ranges, at least two clusters, no empty cluster.
    ///
    /// `sigma` is 0-based here; the JSON document format uses 1-based ids.
    pub fn new(k: usize, l: usize, p: Vec<F>, h: Vec<F>, sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        if n == 0 {
            return Err(Error::Structure("model has no items".into()));
        }
        if k < 2 {
            return Err(Error::Structure(format!(
                "need at least 2 clusters, got {k}"
            )));
        }
        if l == 0 {
            return Err(Error::Structure("model has no questions".into()));
        }
        if p.len() != k * l {
            return Err(Error::Structure(format!(
                "p has {} entries, expected K*L = {}",
                p.len(),
                k * l
            )));
        }
        if h.len() != n {
            return Err(Error::Structure(format!(
                "h has {} entries, expected n = {n}",
                h.len()
            )));
        }
        let zero = F::zero();
        let one = F::one();
        if p.iter()
            .any(|&x| !(zero..=one).contains(&x) || !x.is_finite())
        {
            return Err(Error::Structure("p entries must lie in [0, 1]".into()));
        }
        let half = F::of(0.5);
        if h.iter()
            .any(|&x| !(half..=one).contains(&x) || !x.is_finite())
        {
            return Err(Error::Structure("h entries must lie in [1/2, 1]".into()));
        }
        let mut sizes = vec![0usize; k];
        for (i, &c) in sigma.iter().enumerate() {
            if c >= k {
                return Err(Error::Structure(format!(
                    "sigma[{i}] = {c} is not a cluster id below {k}"
                )));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Structure(format!("cluster {empty} is empty")));
        }
        let alpha = sizes
            .iter()
            .map(|&s| F::of_usize(s) / F::of_usize(n))
            .collect();
        let eta = p
            .iter()
            .map(|&x| x.min(one - x))
            .fold(F::infinity(), F::min);
        Ok(Self {
            n,
            k,
            l,
            p,
            h,
            sigma,
            alpha,
            eta,
        })
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn num_clusters(&self) -> usize {
        self.k
    }

    pub fn num_questions(&self) -> usize {
        self.l
    }

    /// Answer-matrix entry `p_{kl}`.
    pub fn p(&self, k: usize, l: usize) -> F {
        self.p[k * self.l + l]
    }

    /// Scaled signature entry `r_{kl} = 2 p_{kl} - 1`.
    pub fn r(&self, k: usize, l: usize) -> F {
        F::of(2.0) * self.p(k, l) - F::one()
    }

    /// Signature row `r_k` as a vector.
    pub fn r_row(&self, k: usize) -> Vec<F> {
        (0..self.l).map(|l| self.r(k, l)).collect()
    }

    pub fn hardness(&self, i: usize) -> F {
        self.h[i]
    }

    pub fn cluster_of(&self, i: usize) -> usize {
        self.sigma[i]
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn alpha(&self, k: usize) -> F {
        self.alpha[k]
    }

    pub fn eta(&self) -> F {
        self.eta
    }

    /// `h* = min_i (2 h_i - 1)`.
    pub fn h_star(&self) -> F {
        self.h
            .iter()
            .map(|&h| F::of(2.0) * h - F::one())
            .fold(F::infinity(), F::min)
    }

    /// Answer probability `q_{il} = h_i p_{sigma(i) l} + (1 - h_i)(1 - p_{sigma(i) l})`.
    pub fn answer_prob(&self, i: usize, l: usize) -> F {
        mix_prob(self.h[i], self.p(self.sigma[i], l))
    }

    /// The full row `q_i`.
    pub fn answer_prob_row(&self, i: usize) -> Vec<F> {
        (0..self.l).map(|l| self.answer_prob(i, l)).collect()
    }

    /// Loads a model from its JSON document form.
    pub fn from_json(doc: &str) -> Result<Self> {
        let raw: ModelDoc<F> = serde_json::from_str(doc)?;
        raw.try_into()
    }

    /// Serializes the model to its JSON document form (1-based `sigma`).
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            n: self.n,
            k: self.k,
            l: self.l,
            p: self.p.clone(),
            h: self.h.clone(),
            sigma: self.sigma.iter().map(|&c| c + 1).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }
}

/// Blend of a hardness value with an answer probability:
/// `h * p + (1 - h) * (1 - p)`.
#[inline]
pub fn mix_prob<F: Real>(h: F, p: F) -> F {
    h * p + (F::one() - h) * (F::one() - p)
}

/// JSON document form of a model: `{n, K, L, p (row-major K x L), h, sigma}`
/// with 1-based cluster ids in `sigma`. Unknown fields are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc<F> {
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L")]
    l: usize,
    p: Vec<F>,
    h: Vec<F>,
    sigma: Vec<usize>,
}

impl<F: Real> TryFrom<ModelDoc<F>> for Model<F> {
    type Error = Error;

    fn try_from(doc: ModelDoc<F>) -> Result<Self> {
        if doc.sigma.len() != doc.n {
            return Err(Error::Structure(format!(
                "sigma has {} entries, expected n = {}",
                doc.sigma.len(),
                doc.n
            )));
        }
        if doc.sigma.contains(&0) {
            return Err(Error::Structure(
                "sigma uses 1-based cluster ids; found 0".into(),
            ));
        }
        let sigma = doc.sigma.iter().map(|&c| c - 1).collect();
        Model::new(doc.k, doc.l, doc.p, doc.h, sigma)
    }
}

/// Model constants and assumption flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport<F> {
    /// `min_i (2 h_i - 1)`.
    pub h_star: F,
    /// Minimum separation between scaled cluster signatures. Reported as 0
    /// when `h* <= 0`, where the defining range `[0, 1/h*]` is unbounded.
    pub rho_star: F,
    /// `min_{k,l} min(p_{kl}, 1 - p_{kl})`.
    pub eta: F,
    /// `h* in (0, 1)` and `rho* > 0`.
    pub a1_ok: bool,
    /// `eta > 0`.
    pub a2_ok: bool,
}

/// Computes the model constants and checks the admissibility assumptions.
///
/// Structural validity (shapes, nonempty clusters, `K >= 2`) is enforced at
/// construction, so this is deterministic and total on any `Model`.
pub fn validate_model<F: Real>(model: &Model<F>) -> ModelReport<F> {
    let h_star = model.h_star();
    let rho = if h_star > F::zero() {
        rho_star(model).expect("h* > 0 checked")
    } else {
        F::zero()
    };
    let eta = model.eta();
    ModelReport {
        h_star,
        rho_star: rho,
        eta,
        a1_ok: h_star > F::zero() && h_star < F::one() && rho > F::zero(),
        a2_ok: eta > F::zero(),
    }
}

/// Minimum over ordered cluster pairs `k != k'` of
/// `min_{c in [0, 1/h*]} max_l |c r_{k'l} - r_{kl}|`.
///
/// Errors when `h* <= 0` (the admissible range for `c` is unbounded).
pub fn rho_star<F: Real>(model: &Model<F>) -> Result<F> {
    let h_star = model.h_star();
    if h_star <= F::zero() {
        return Err(Error::Assumption(format!(
            "rho* requires h* > 0, got h* = {h_star}"
        )));
    }
    let c_max = F::one() / h_star;
    let mut best = F::infinity();
    for k in 0..model.num_clusters() {
        for k_other in 0..model.num_clusters() {
            if k == k_other {
                continue;
            }
            let target = model.r_row(k);
            let scaled = model.r_row(k_other);
            best = best.min(min_scaled_linf_distance(&scaled, &target, F::zero(), c_max));
        }
    }
    Ok(best)
}

/// Minimizes `f(c) = max_l |c * a_l - b_l|` over `c in [lo, hi]`.
///
/// `f` is convex piecewise-linear, so its minimum over an interval is attained
/// at an interval endpoint or at a breakpoint of the upper envelope. Every
/// envelope breakpoint is either a vertex of one `|a_l c - b_l|` or a crossing
/// of two of them, so enumerating those O(L^2) candidates is exact. For large
/// L golden-section search is used instead.
pub(crate) fn min_scaled_linf_distance<F: Real>(a: &[F], b: &[F], lo: F, hi: F) -> F {
    debug_assert_eq!(a.len(), b.len());
    let f = |c: F| -> F {
        a.iter()
            .zip(b)
            .map(|(&al, &bl)| (c * al - bl).abs())
            .fold(F::zero(), F::max)
    };
    if a.len() > RHO_EXACT_MAX_QUESTIONS {
        let (_, value) = crate::divergence::golden_section_min(f, lo, hi);
        return value;
    }

    let mut best = f(lo).min(f(hi));
    let mut consider = |c: F| {
        if c.is_finite() && c > lo && c < hi {
            best = best.min(f(c));
        }
    };
    for l in 0..a.len() {
        if a[l] != F::zero() {
            consider(b[l] / a[l]);
        }
        for m in (l + 1)..a.len() {
            // crossings of the lines +-(a_l c - b_l) and +-(a_m c - b_m)
            if a[l] != a[m] {
                consider((b[l] - b[m]) / (a[l] - a[m]));
            }
            if a[l] + a[m] != F::zero() {
                consider((b[l] + b[m]) / (a[l] + a[m]));
            }
        }
    }
    best
}

/// One round of interaction: user `t` is shown `w` distinct items together
/// with one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEvent {
    /// 1-based user (round) index.
    pub t: u64,
    /// Distinct item ids shown to the user.
    pub items: Vec<usize>,
    /// Question id, 0-based.
    pub question: usize,
}

impl SelectionEvent {
    pub fn new(t: u64, items: Vec<usize>, question: usize) -> Result<Self> {
        let mut sorted = items.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != items.len() {
            return Err(Error::Structure("selection lists an item twice".into()));
        }
        if items.is_empty() {
            return Err(Error::Structure("selection lists no items".into()));
        }
        Ok(Self { t, items, question })
    }
}

/// Answers gathered for one selection event, `+1`/`-1` per listed item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseBatch {
    pub event: SelectionEvent,
    pub answers: Vec<i8>,
}

/// Draws the answers of user `event.t` for the listed items.
///
/// Answer for item `i` is `+1` with probability `q_{i, event.question}`,
/// independently across items, keyed by `(seed, t, i)`: identical inputs give
/// bit-identical batches, in any evaluation order.
pub fn sample_answers<F: Real>(
    model: &Model<F>,
    event: &SelectionEvent,
    seed: u64,
) -> ResponseBatch {
    let answers = event
        .items
        .iter()
        .map(|&i| {
            let q = model.answer_prob(i, event.question).as_f64();
            if rng::unit_f64(seed, &[event.t, i as u64]) < q {
                1
            } else {
                -1
            }
        })
        .collect();
    ResponseBatch {
        event: event.clone(),
        answers,
    }
}

/// Anything that can answer selection events: a simulated model or a replayed
/// response log. Returns `None` when the source is exhausted.
pub trait AnswerSource {
    fn num_items(&self) -> usize;
    fn num_questions(&self) -> usize;
    /// Answers (`+1`/`-1`), one per item in `event.items`.
    fn answers(&mut self, event: &SelectionEvent) -> Option<Vec<i8>>;
    /// Ground-truth cluster map, when known.
    fn truth(&self) -> Option<&[usize]> {
        None
    }
}

/// Simulation-backed answer source.
pub struct SimulatedAnswers<'a, F> {
    model: &'a Model<F>,
    seed: u64,
}

impl<'a, F: Real> SimulatedAnswers<'a, F> {
    pub fn new(model: &'a Model<F>, seed: u64) -> Self {
        Self { model, seed }
    }
}

impl<F: Real> AnswerSource for SimulatedAnswers<'_, F> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }

    fn num_questions(&self) -> usize {
        self.model.num_questions()
    }

    fn answers(&mut self, event: &SelectionEvent) -> Option<Vec<i8>> {
        Some(sample_answers(self.model, event, self.seed).answers)
    }

    fn truth(&self) -> Option<&[usize]> {
        Some(self.model.sigma())
    }
}
