//! Exact computations over finite joint distributions.
//!
//! These routines check the variational objective on discrete tables where
//! every expectation is a finite sum: the KL between an approximate joint
//! `Q(x, y) = Q(x)·Q(y|x)` and a target joint `P(x, y)` equals the
//! reconstruction + likelihood cross-entropy plus a signed conditional-entropy
//! term, up to the constant `−H(Q(x))`. The sign of the entropy term is
//! resolved numerically by [`verify_decomposition`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};

const SUM_TOL: f64 = 1e-12;
/// Probabilities below this are treated as zero support.
pub const SUPPORT_FLOOR: f64 = 1e-300;
/// Residual under which a decomposition identity counts as exact.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// A probability table over the finite domain `X×Y`, row-major in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    x_size: usize,
    y_size: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(x_size: usize, y_size: usize, table: Vec<f64>) -> Result<Self> {
        if x_size == 0 || y_size == 0 {
            return Err(VatError::InvalidDistribution("domain sizes must be >= 1".into()));
        }
        if table.len() != x_size * y_size {
            return Err(VatError::DomainMismatch(format!(
                "table has {} cells, expected {}x{}",
                table.len(),
                x_size,
                y_size
            )));
        }
        check_probability_vector(&table, "joint table")?;
        Ok(Self {
            x_size,
            y_size,
            table,
        })
    }

    /// Normalizes nonnegative weights into a joint.
    pub fn from_weights(x_size: usize, y_size: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() || weights.iter().any(|&w| w < 0.0) {
            return Err(VatError::InvalidDistribution("weights must be nonnegative with positive sum".into()));
        }
        Self::new(x_size, y_size, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(x_size: usize, y_size: usize) -> Result<Self> {
        let n = x_size * y_size;
        Self::new(x_size, y_size, vec![1.0 / n as f64; n])
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.y_size + y]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.x_size)
            .map(|x| (0..self.y_size).map(|y| self.at(x, y)).sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.y_size)
            .map(|y| (0..self.x_size).map(|x| self.at(x, y)).sum())
            .collect()
    }
}

/// `Q(x)·Q(y|x)` with a fixed marginal and a row-stochastic conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredQ {
    marginal: Vec<f64>,
    conditional: Vec<f64>,
    y_size: usize,
}

impl FactoredQ {
    pub fn new(marginal: Vec<f64>, conditional: Vec<f64>, y_size: usize) -> Result<Self> {
        check_probability_vector(&marginal, "Q(x)")?;
        if y_size == 0 || conditional.len() != marginal.len() * y_size {
            return Err(VatError::DomainMismatch(format!(
                "conditional has {} cells, expected {}x{}",
                conditional.len(),
                marginal.len(),
                y_size
            )));
        }
        for (x, row) in conditional.chunks(y_size).enumerate() {
            check_probability_vector(row, &format!("Q(y|x={x})"))?;
        }
        Ok(Self {
            marginal,
            conditional,
            y_size,
        })
    }

    /// Factors a joint into `Q(x)` and `Q(y|x)`; fails on an empty row.
    pub fn from_joint(joint: &DiscreteJoint) -> Result<Self> {
        let marginal = joint.marginal_x();
        let mut conditional = Vec::with_capacity(joint.table.len());
        for (x, &mx) in marginal.iter().enumerate() {
            if mx < SUPPORT_FLOOR {
                return Err(VatError::ZeroProbability(format!("Q(x={x}) = 0")));
            }
            conditional.extend((0..joint.y_size).map(|y| joint.at(x, y) / mx));
        }
        Self::new(marginal, conditional, joint.y_size)
    }

    pub fn x_size(&self) -> usize {
        self.marginal.len()
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn conditional_row(&self, x: usize) -> &[f64] {
        &self.conditional[x * self.y_size..(x + 1) * self.y_size]
    }

    pub fn to_joint(&self) -> Result<DiscreteJoint> {
        let table = self
            .marginal
            .iter()
            .enumerate()
            .flat_map(|(x, &mx)| self.conditional_row(x).iter().map(move |&c| mx * c))
            .collect::<Vec<_>>();
        // Products may drift from unit mass by a few ulps; renormalize.
        DiscreteJoint::from_weights(self.x_size(), self.y_size, table)
    }
}

/// Class prior, per-class likelihood rows over `Y`, and the interested subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditional {
    class_prior: Vec<f64>,
    likelihoods: Vec<f64>,
    y_size: usize,
    interested: Vec<usize>,
}

impl ClassConditional {
    pub fn new(
        class_prior: Vec<f64>,
        likelihoods: Vec<f64>,
        y_size: usize,
        interested: Vec<usize>,
    ) -> Result<Self> {
        check_probability_vector(&class_prior, "class prior")?;
        let n = class_prior.len();
        if y_size == 0 || likelihoods.len() != n * y_size {
            return Err(VatError::DomainMismatch(format!(
                "likelihoods have {} cells, expected {n}x{y_size}",
                likelihoods.len()
            )));
        }
        for (i, row) in likelihoods.chunks(y_size).enumerate() {
            check_probability_vector(row, &format!("P(y|c={i})"))?;
        }
        if interested.is_empty() || interested.len() > n {
            return Err(VatError::InvalidParameter(format!(
                "interested subset size {} must be in [1, {n}]",
                interested.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in &interested {
            if i >= n || seen[i] {
                return Err(VatError::InvalidParameter(format!(
                    "interested index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        Ok(Self {
            class_prior,
            likelihoods,
            y_size,
            interested,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn prior(&self) -> &[f64] {
        &self.class_prior
    }

    pub fn interested(&self) -> &[usize] {
        &self.interested
    }

    #[inline]
    pub fn likelihood(&self, class: usize, y: usize) -> f64 {
        self.likelihoods[class * self.y_size + y]
    }
}

fn check_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(VatError::InvalidDistribution(format!("{what} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(VatError::InvalidDistribution(format!("{what} has entry {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(VatError::InvalidDistribution(format!(
            "{what} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// `Σ q·log(q/p)` in nats.
pub fn kl_joint(q: &DiscreteJoint, p: &DiscreteJoint) -> Result<f64> {
    if q.x_size != p.x_size || q.y_size != p.y_size {
        return Err(VatError::DomainMismatch(format!(
            "q is {}x{}, p is {}x{}",
            q.x_size, q.y_size, p.x_size, p.y_size
        )));
    }
    let mut kl = 0.0;
    for (cell, (&qv, &pv)) in q.table.iter().zip(&p.table).enumerate() {
        if qv == 0.0 {
            continue;
        }
        if pv < SUPPORT_FLOOR {
            return Err(VatError::UndefinedDivergence { cell, q: qv, p: pv });
        }
        kl += qv * (qv / pv).ln();
    }
    // Rounding can leave a tiny negative value for q == p.
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Sign attached to the conditional-entropy term of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropySign {
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
}

impl EntropySign {
    pub fn value(self) -> f64 {
        match self {
            EntropySign::Plus => 1.0,
            EntropySign::Minus => -1.0,
        }
    }

    pub fn both() -> [EntropySign; 2] {
        [EntropySign::Plus, EntropySign::Minus]
    }
}

/// `E_{x~Q}[E_{y~Q(y|x)}(−log P(x|y) − log P(y))] + sign·E_x[H(Q(y|x))]`.
///
/// `P(x|y)` and `P(y)` are derived from the joint `p`.
pub fn decomposed_objective(q: &FactoredQ, p: &DiscreteJoint, sign: EntropySign) -> Result<f64> {
    if q.x_size() != p.x_size || q.y_size != p.y_size {
        return Err(VatError::DomainMismatch(format!(
            "q is {}x{}, p is {}x{}",
            q.x_size(),
            q.y_size,
            p.x_size,
            p.y_size
        )));
    }
    let p_y = p.marginal_y();
    let mut cross = 0.0;
    let mut cond_entropy = 0.0;
    for (x, &qx) in q.marginal.iter().enumerate() {
        if qx == 0.0 {
            continue;
        }
        let row = q.conditional_row(x);
        for (y, &qyx) in row.iter().enumerate() {
            if qyx == 0.0 {
                continue;
            }
            if p_y[y] < SUPPORT_FLOOR {
                return Err(VatError::ZeroProbability(format!("P(y={y}) = 0")));
            }
            let p_x_given_y = p.at(x, y) / p_y[y];
            if p_x_given_y < SUPPORT_FLOOR {
                return Err(VatError::ZeroProbability(format!("P(x={x}|y={y}) = 0")));
            }
            cross += qx * qyx * (-p_x_given_y.ln() - p_y[y].ln());
        }
        cond_entropy += qx * entropy(row);
    }
    Ok(cross + sign.value() * cond_entropy)
}

/// `|KL(Q‖P) − (decomposed_objective + (−H(Q(x))))|` for one sign.
pub fn decomposition_residual(q: &FactoredQ, p: &DiscreteJoint, sign: EntropySign) -> Result<f64> {
    let kl = kl_joint(&q.to_joint()?, p)?;
    let constant = -entropy(q.marginal());
    Ok((kl - (decomposed_objective(q, p, sign)? + constant)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub trials: usize,
    pub x_size: usize,
    pub y_size: usize,
    pub seed: u64,
    /// Worst residual under the resolved sign (or under both, when no
    /// instance could tell the signs apart).
    pub max_residual: f64,
    /// `None` when every instance was sign-agnostic (zero conditional entropy).
    pub resolved_sign: Option<EntropySign>,
    /// Every discriminating instance agreed on the same sign.
    pub stable: bool,
    /// Smallest residual seen under the rejected sign.
    pub rejected_sign_min_residual: Option<f64>,
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_instance(rng: &mut ChaCha8Rng, x_size: usize, y_size: usize) -> Result<(FactoredQ, DiscreteJoint)> {
    loop {
        let marginal = random_simplex(rng, x_size);
        let conditional: Vec<f64> = (0..x_size).flat_map(|_| random_simplex(rng, y_size)).collect();
        let p_table = random_simplex(rng, x_size * y_size);
        if marginal.iter().chain(&p_table).any(|&v| v < 1e-12) {
            continue;
        }
        // Sums of normalized draws can miss 1 by more than the tolerance only
        // in pathological cases; such draws are resampled.
        match (
            FactoredQ::new(marginal, conditional, y_size),
            DiscreteJoint::new(x_size, y_size, p_table),
        ) {
            (Ok(q), Ok(p)) => return Ok((q, p)),
            _ => continue,
        }
    }
}

/// Checks the decomposition on `trials` random instances and resolves the
/// entropy sign.
pub fn verify_decomposition(trials: usize, sizes: (usize, usize), seed: u64) -> Result<DecompositionReport> {
    if trials == 0 {
        return Err(VatError::InvalidParameter("trials must be >= 1".into()));
    }
    let (x_size, y_size) = sizes;
    if x_size == 0 || y_size == 0 {
        return Err(VatError::InvalidParameter("sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(trials);
    for _ in 0..trials {
        instances.push(random_instance(&mut rng, x_size, y_size)?);
    }
    summarize(instances.iter().map(|(q, p)| (q, p)), trials, sizes, seed)
}

/// Same as [`verify_decomposition`] over caller-provided instances.
pub fn verify_instances<'a>(
    instances: impl IntoIterator<Item = (&'a FactoredQ, &'a DiscreteJoint)>,
) -> Result<DecompositionReport> {
    let list: Vec<_> = instances.into_iter().collect();
    let sizes = list
        .first()
        .map(|(q, _)| (q.x_size(), q.y_size()))
        .ok_or_else(|| VatError::InvalidParameter("trials must be >= 1".into()))?;
    let n = list.len();
    summarize(list, n, sizes, 0)
}

fn summarize<'a>(
    instances: impl IntoIterator<Item = (&'a FactoredQ, &'a DiscreteJoint)>,
    trials: usize,
    (x_size, y_size): (usize, usize),
    seed: u64,
) -> Result<DecompositionReport> {
    // Residuals under (+1, -1) for every instance.
    let mut rows: Vec<[f64; 2]> = Vec::new();
    for (q, p) in instances {
        rows.push([
            decomposition_residual(q, p, EntropySign::Plus)?,
            decomposition_residual(q, p, EntropySign::Minus)?,
        ]);
    }
    let votes: Vec<usize> = rows
        .iter()
        .filter_map(|r| match (r[0] < RESIDUAL_TOL, r[1] < RESIDUAL_TOL) {
            (true, false) => Some(0),
            (false, true) => Some(1),
            _ => None,
        })
        .collect();
    let resolved = votes.first().copied();
    let stable = votes.iter().all(|&v| Some(v) == resolved);
    let max_residual = match resolved {
        Some(i) => rows.iter().map(|r| r[i]).fold(0.0, f64::max),
        None => rows.iter().map(|r| r[0].min(r[1])).fold(0.0, f64::max),
    };
    let rejected = resolved.map(|i| rows.iter().map(|r| r[1 - i]).fold(f64::INFINITY, f64::min));
    Ok(DecompositionReport {
        trials,
        x_size,
        y_size,
        seed,
        max_residual,
        resolved_sign: resolved.map(|i| EntropySign::both()[i]),
        stable,
        rejected_sign_min_residual: rejected,
    })
}

/// Negative log likelihood of `y` under the full mixture over all classes and
/// under the unweighted sum over the interested classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalNll {
    pub full: f64,
    pub marginal: f64,
}

pub fn marginal_nll(cc: &ClassConditional, y_index: usize) -> Result<MarginalNll> {
    if y_index >= cc.y_size {
        return Err(VatError::InvalidParameter(format!(
            "y index {y_index} outside [0, {})",
            cc.y_size
        )));
    }
    let mixture: f64 = cc
        .class_prior
        .iter()
        .enumerate()
        .map(|(i, &prior)| cc.likelihood(i, y_index) * prior)
        .sum();
    let interested: f64 = cc.interested.iter().map(|&i| cc.likelihood(i, y_index)).sum();
    if mixture <= 0.0 {
        return Err(VatError::ZeroProbability(format!("total likelihood at y={y_index} is 0")));
    }
    if interested <= 0.0 {
        return Err(VatError::ZeroProbability(format!(
            "interested likelihood at y={y_index} is 0"
        )));
    }
    Ok(MarginalNll {
        full: -mixture.ln(),
        marginal: -interested.ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_kl(q: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..q.len() {
            if q[i] > 0.0 {
                s += q[i] * q[i].ln() - q[i] * p[i].ln();
            }
        }
        s
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = DiscreteJoint::new(2, 3, vec![0.1, 0.2, 0.05, 0.3, 0.15, 0.2]).unwrap();
        assert_eq!(kl_joint(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_uniform_against_diagonal_heavy() {
        let q = DiscreteJoint::uniform(2, 2).unwrap();
        let p = DiscreteJoint::new(2, 2, vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        // Frozen from the four-cell sum: 0.5·ln(0.25/0.4) + 0.5·ln(0.25/0.1).
        let expected = 0.223_143_551_314_209_7;
        assert!((brute_kl(q.table(), p.table()) - expected).abs() < 1e-15);
        assert!((kl_joint(&q, &p).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_outside_support_is_undefined() {
        let q = DiscreteJoint::uniform(1, 2).unwrap();
        let p = DiscreteJoint::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(kl_joint(&q, &p), Err(VatError::UndefinedDivergence { cell: 1, .. })));
    }

    #[test]
    fn kl_domain_mismatch() {
        let q = DiscreteJoint::uniform(2, 2).unwrap();
        let p = DiscreteJoint::uniform(1, 4).unwrap();
        assert!(matches!(kl_joint(&q, &p), Err(VatError::DomainMismatch(_))));
    }

    #[test]
    fn joint_rejects_bad_tables() {
        assert!(DiscreteJoint::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(1, 2, vec![-0.5, 1.5]).is_err());
        assert!(DiscreteJoint::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        // -(0.25 ln 0.25 + 0.75 ln 0.75)
        let expected = 0.562_335_144_618_808_3;
        assert!((entropy(&[0.25, 0.75]) - expected).abs() < 1e-15);
    }

    #[test]
    fn one_hot_conditional_is_sign_agnostic() {
        let q = FactoredQ::new(vec![0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let p = DiscreteJoint::new(2, 2, vec![0.3, 0.2, 0.1, 0.4]).unwrap();
        let a = decomposed_objective(&q, &p, EntropySign::Plus).unwrap();
        let b = decomposed_objective(&q, &p, EntropySign::Minus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_cross_entropy_terms() {
        // Uniform P on 2x2: P(x|y) = 1/2 and P(y) = 1/2 everywhere.
        let q = FactoredQ::new(vec![0.5, 0.5], vec![0.5; 4], 2).unwrap();
        let p = DiscreteJoint::uniform(2, 2).unwrap();
        let ln2 = 2f64.ln();
        let cross_only = decomposed_objective(&q, &p, EntropySign::Plus).unwrap() - ln2;
        assert!((cross_only - 2.0 * ln2).abs() < 1e-15);
    }

    #[test]
    fn exactly_one_sign_fits_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (q, p) = random_instance(&mut rng, 8, 8).unwrap();
            let plus = decomposition_residual(&q, &p, EntropySign::Plus).unwrap();
            let minus = decomposition_residual(&q, &p, EntropySign::Minus).unwrap();
            assert!((plus < RESIDUAL_TOL) ^ (minus < RESIDUAL_TOL), "plus={plus} minus={minus}");
        }
    }

    #[test]
    fn verify_reports_single_stable_sign() {
        let r = verify_decomposition(100, (8, 8), 0).unwrap();
        assert!(r.max_residual < RESIDUAL_TOL);
        assert!(r.stable);
        assert_eq!(r.resolved_sign, Some(EntropySign::Minus));
        assert!(r.rejected_sign_min_residual.unwrap() > 1e-3);
    }

    #[test]
    fn single_point_domain_has_zero_residual() {
        let r = verify_decomposition(3, (1, 1), 5).unwrap();
        assert_eq!(r.max_residual, 0.0);
        assert_eq!(r.resolved_sign, None);
    }

    #[test]
    fn q_equal_p_objective_is_the_constant() {
        let p = DiscreteJoint::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = FactoredQ::from_joint(&p).unwrap();
        let r = verify_instances([(&q, &p)]).unwrap();
        assert!(r.max_residual < 1e-15);
        let obj = decomposed_objective(&q, &p, EntropySign::Minus).unwrap();
        assert!((obj - entropy(q.marginal())).abs() < 1e-15);
    }

    #[test]
    fn verify_rejects_zero_trials() {
        assert!(verify_decomposition(0, (2, 2), 0).is_err());
    }

    #[test]
    fn marginal_nll_identical_rows_ignores_prior() {
        let row = [0.2, 0.5, 0.3];
        let lik: Vec<f64> = row.iter().chain(&row).chain(&row).copied().collect();
        let cc = ClassConditional::new(vec![0.7, 0.2, 0.1], lik, 3, vec![0, 1, 2]).unwrap();
        let r = marginal_nll(&cc, 1).unwrap();
        assert!((r.full + 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn marginal_nll_single_interested_index() {
        let lik = vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5];
        let cc = ClassConditional::new(vec![0.2, 0.3, 0.5], lik, 2, vec![1]).unwrap();
        let r = marginal_nll(&cc, 0).unwrap();
        assert_eq!(r.marginal, -(0.2f64).ln());
    }

    #[test]
    fn marginal_nll_concentrated_three_classes() {
        let lik = vec![0.98, 0.01, 0.01, 0.01, 0.98, 0.01, 0.01, 0.01, 0.98];
        let cc = ClassConditional::new(vec![0.5, 0.3, 0.2], lik, 3, vec![2]).unwrap();
        let r = marginal_nll(&cc, 2).unwrap();
        // full: -ln(0.01·0.5 + 0.01·0.3 + 0.98·0.2) = -ln(0.204)
        assert!((r.full - 1.589_635_285_137_920_5).abs() < 1e-12);
        // marginal: -ln(0.98)
        assert!((r.marginal - 0.020_202_707_317_519_466).abs() < 1e-15);
    }

    #[test]
    fn marginal_nll_errors() {
        let cc = ClassConditional::new(vec![1.0], vec![1.0, 0.0], 2, vec![0]).unwrap();
        assert!(matches!(marginal_nll(&cc, 1), Err(VatError::ZeroProbability(_))));
        assert!(marginal_nll(&cc, 2).is_err());
        assert!(ClassConditional::new(vec![0.5, 0.5], vec![1.0, 1.0], 1, vec![0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..1.0, k).prop_map(|v| {
                let s: f64 = v.iter().sum();
                let mut out: Vec<f64> = v.iter().map(|x| x / s).collect();
                // Push rounding drift into the last cell so the sum is 1 within tolerance.
                let drift = 1.0 - out.iter().sum::<f64>();
                *out.last_mut().unwrap() += drift;
                out
            })
        }

        proptest! {
            #[test]
            fn kl_nonnegative_and_zero_iff_equal(q in simplex(6), p in simplex(6)) {
                let q = DiscreteJoint::new(2, 3, q).unwrap();
                let p = DiscreteJoint::new(2, 3, p).unwrap();
                let kl = kl_joint(&q, &p).unwrap();
                prop_assert!(kl >= 0.0);
                prop_assert_eq!(kl_joint(&q, &q).unwrap(), 0.0);
                if q.table().iter().zip(p.table()).any(|(a, b)| (a - b).abs() > 1e-6) {
                    prop_assert!(kl > 0.0);
                }
            }

            #[test]
            fn entropy_bounds(p in simplex(5), perm in Just(vec![3usize, 0, 4, 1, 2])) {
                let h = entropy(&p);
                prop_assert!(h >= 0.0 && h <= 5f64.ln() + 1e-12);
                let permuted: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
                prop_assert!((entropy(&permuted) - h).abs() < 1e-12);
            }

            #[test]
            fn uniform_prior_full_exceeds_marginal_by_log_n(lik in proptest::collection::vec(simplex(4), 5), y in 0usize..4) {
                let n = lik.len();
                let flat: Vec<f64> = lik.into_iter().flatten().collect();
                let cc = ClassConditional::new(vec![1.0 / n as f64; n], flat, 4, (0..n).collect()).unwrap();
                let r = marginal_nll(&cc, y).unwrap();
                prop_assert!((r.full - (r.marginal + (n as f64).ln())).abs() < 1e-12);
            }
        }
    }
}
