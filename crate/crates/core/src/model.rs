//! Problem representation and the closed-form quantities derived from it.
//!
//! All math runs on dense index arrays in label order. A buyer type is the
//! pair (signal θ, budget level b); its flat index is `theta * |B| + budget`.

use std::fmt;

use crate::error::{Error, Result};
use crate::PROB_TOL;

/// A finite information-selling problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    omega_labels: Vec<String>,
    theta_labels: Vec<String>,
    action_labels: Vec<String>,
    budget_levels: Vec<f64>,
    /// μ(ω,θ,b), indexed `[ω][θ][b]`.
    prior: Vec<f64>,
    /// u(ω,θ,a), indexed `[ω][θ][a]`.
    utility: Vec<f64>,
    seller_budget: f64,
}

/// Buyer type (θ, b) by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BuyerType {
    pub theta: usize,
    pub budget: usize,
}

/// A distribution over seller signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter("posterior entries must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidParameter(format!("posterior mass {total} != 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A violated instance invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    PriorMass(f64),
    NegativePrior { omega: usize, theta: usize, budget: usize },
    NonFinite(&'static str),
    NegativeBudget(f64),
    BudgetsNotIncreasing,
    NegativeSellerBudget(f64),
    DuplicateLabel { kind: &'static str, label: String },
    Empty(&'static str),
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PriorMass(m) => write!(f, "prior mass {m} ≠ 1"),
            Self::NegativePrior { omega, theta, budget } => {
                write!(f, "prior < 0 at (ω={omega}, θ={theta}, b={budget})")
            }
            Self::NonFinite(what) => write!(f, "{what} not finite"),
            Self::NegativeBudget(b) => write!(f, "budget < 0 ({b})"),
            Self::BudgetsNotIncreasing => write!(f, "budget levels not strictly increasing"),
            Self::NegativeSellerBudget(m) => write!(f, "seller budget < 0 ({m})"),
            Self::DuplicateLabel { kind, label } => write!(f, "duplicate {kind} label `{label}`"),
            Self::Empty(kind) => write!(f, "no {kind} given"),
        }
    }
}

impl Instance {
    /// Builds an instance after checking dimensions only. Call
    /// [`Instance::validate`] for the value invariants.
    pub fn new_unchecked(
        omega_labels: Vec<String>,
        theta_labels: Vec<String>,
        action_labels: Vec<String>,
        budget_levels: Vec<f64>,
        prior: Vec<f64>,
        utility: Vec<f64>,
        seller_budget: f64,
    ) -> Result<Self> {
        let (no, nt, na, nb) = (omega_labels.len(), theta_labels.len(), action_labels.len(), budget_levels.len());
        if prior.len() != no * nt * nb {
            return Err(Error::ShapeMismatch(format!("prior has {} entries, expected {}", prior.len(), no * nt * nb)));
        }
        if utility.len() != no * nt * na {
            return Err(Error::ShapeMismatch(format!(
                "utility has {} entries, expected {}",
                utility.len(),
                no * nt * na
            )));
        }
        Ok(Self { omega_labels, theta_labels, action_labels, budget_levels, prior, utility, seller_budget })
    }

    /// Builds and validates an instance.
    pub fn new(
        omega_labels: Vec<String>,
        theta_labels: Vec<String>,
        action_labels: Vec<String>,
        budget_levels: Vec<f64>,
        prior: Vec<f64>,
        utility: Vec<f64>,
        seller_budget: f64,
    ) -> Result<Self> {
        let instance = Self::new_unchecked(
            omega_labels,
            theta_labels,
            action_labels,
            budget_levels,
            prior,
            utility,
            seller_budget,
        )?;
        instance.validate().map_err(|issues| Error::InvalidInstance(issues.iter().map(|i| i.to_string()).collect()))?;
        Ok(instance)
    }

    /// Returns every violated invariant.
    pub fn validate(&self) -> std::result::Result<(), Vec<ValidationIssue>> {
        let mut issues = Vec::new();
        for (kind, labels) in
            [("omega", &self.omega_labels), ("theta", &self.theta_labels), ("action", &self.action_labels)]
        {
            if labels.is_empty() {
                issues.push(ValidationIssue::Empty(kind));
            }
            for (i, label) in labels.iter().enumerate() {
                if labels[..i].contains(label) {
                    issues.push(ValidationIssue::DuplicateLabel { kind, label: label.clone() });
                }
            }
        }
        if self.budget_levels.is_empty() {
            issues.push(ValidationIssue::Empty("budget"));
        }
        for &b in &self.budget_levels {
            if !b.is_finite() {
                issues.push(ValidationIssue::NonFinite("budget"));
            } else if b < 0.0 {
                issues.push(ValidationIssue::NegativeBudget(b));
            }
        }
        if self.budget_levels.windows(2).any(|w| w[1] <= w[0]) {
            issues.push(ValidationIssue::BudgetsNotIncreasing);
        }
        if !self.seller_budget.is_finite() {
            issues.push(ValidationIssue::NonFinite("seller budget"));
        } else if self.seller_budget < 0.0 {
            issues.push(ValidationIssue::NegativeSellerBudget(self.seller_budget));
        }
        if self.utility.iter().any(|u| !u.is_finite()) {
            issues.push(ValidationIssue::NonFinite("utility"));
        }
        if self.prior.iter().any(|p| !p.is_finite()) {
            issues.push(ValidationIssue::NonFinite("prior"));
        } else {
            for w in 0..self.n_omega() {
                for t in 0..self.n_theta() {
                    for b in 0..self.n_budgets() {
                        if self.prior(w, t, b) < 0.0 {
                            issues.push(ValidationIssue::NegativePrior { omega: w, theta: t, budget: b });
                        }
                    }
                }
            }
            let mass: f64 = self.prior.iter().sum();
            if (mass - 1.0).abs() > PROB_TOL {
                issues.push(ValidationIssue::PriorMass(mass));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    pub fn n_omega(&self) -> usize {
        self.omega_labels.len()
    }

    pub fn n_theta(&self) -> usize {
        self.theta_labels.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_labels.len()
    }

    pub fn n_budgets(&self) -> usize {
        self.budget_levels.len()
    }

    pub fn n_types(&self) -> usize {
        self.n_theta() * self.n_budgets()
    }

    pub fn omega_labels(&self) -> &[String] {
        &self.omega_labels
    }

    pub fn theta_labels(&self) -> &[String] {
        &self.theta_labels
    }

    pub fn action_labels(&self) -> &[String] {
        &self.action_labels
    }

    pub fn budget_levels(&self) -> &[f64] {
        &self.budget_levels
    }

    pub fn budget(&self, level: usize) -> f64 {
        self.budget_levels[level]
    }

    pub fn seller_budget(&self) -> f64 {
        self.seller_budget
    }

    pub fn prior(&self, omega: usize, theta: usize, budget: usize) -> f64 {
        self.prior[(omega * self.n_theta() + theta) * self.n_budgets() + budget]
    }

    pub fn utility(&self, omega: usize, theta: usize, action: usize) -> f64 {
        self.utility[(omega * self.n_theta() + theta) * self.n_actions() + action]
    }

    pub fn type_index(&self, ty: BuyerType) -> usize {
        ty.theta * self.n_budgets() + ty.budget
    }

    pub fn type_at(&self, index: usize) -> BuyerType {
        BuyerType { theta: index / self.n_budgets(), budget: index % self.n_budgets() }
    }

    pub fn types(&self) -> impl Iterator<Item = BuyerType> + '_ {
        (0..self.n_types()).map(|i| self.type_at(i))
    }

    /// Human-readable `theta@budget` key, also used by the JSON formats.
    pub fn type_key(&self, ty: BuyerType) -> String {
        format!("{}@{}", self.theta_labels[ty.theta], fmt_money(self.budget_levels[ty.budget]))
    }

    pub fn omega_index(&self, label: &str) -> Result<usize> {
        find_label(&self.omega_labels, label, "omega")
    }

    pub fn theta_index(&self, label: &str) -> Result<usize> {
        find_label(&self.theta_labels, label, "theta")
    }

    pub fn action_index(&self, label: &str) -> Result<usize> {
        find_label(&self.action_labels, label, "action")
    }

    pub fn budget_index(&self, amount: f64) -> Result<usize> {
        self.budget_levels
            .iter()
            .position(|&b| (b - amount).abs() <= PROB_TOL * b.abs().max(1.0))
            .ok_or_else(|| Error::UnknownLabel { kind: "budget", label: fmt_money(amount) })
    }

    /// Looks up a buyer type by θ label and budget amount.
    pub fn buyer_type(&self, theta: &str, budget: f64) -> Result<BuyerType> {
        Ok(BuyerType { theta: self.theta_index(theta)?, budget: self.budget_index(budget)? })
    }

    fn check_type(&self, ty: BuyerType) -> Result<()> {
        if ty.theta >= self.n_theta() || ty.budget >= self.n_budgets() {
            return Err(Error::UnknownLabel { kind: "type", label: format!("{ty:?}") });
        }
        Ok(())
    }

    /// μ(θ,b) = Σ_ω μ(ω,θ,b).
    pub fn marginal_type(&self, ty: BuyerType) -> Result<f64> {
        self.check_type(ty)?;
        Ok((0..self.n_omega()).map(|w| self.prior(w, ty.theta, ty.budget)).sum())
    }

    /// μ(ω) = Σ_{θ,b} μ(ω,θ,b).
    pub fn marginal_omega(&self) -> Vec<f64> {
        (0..self.n_omega()).map(|w| self.types().map(|ty| self.prior(w, ty.theta, ty.budget)).sum()).collect()
    }

    /// μ(ω|θ,b).
    pub fn conditional_omega(&self, ty: BuyerType) -> Result<Posterior> {
        let mass = self.marginal_type(ty)?;
        if mass <= 0.0 {
            return Err(Error::DegenerateConditional(self.type_key(ty)));
        }
        Ok(Posterior((0..self.n_omega()).map(|w| self.prior(w, ty.theta, ty.budget) / mass).collect()))
    }

    /// Σ_ω belief(ω)·u(ω,θ,a).
    pub fn expected_utility(&self, belief: &[f64], theta: usize, action: usize) -> f64 {
        belief.iter().enumerate().map(|(w, p)| p * self.utility(w, theta, action)).sum()
    }

    /// max_a Σ_ω belief(ω)·u(ω,θ,a).
    pub fn best_expected_utility(&self, belief: &[f64], theta: usize) -> f64 {
        (0..self.n_actions()).map(|a| self.expected_utility(belief, theta, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Expected utility under full revelation: Σ_ω belief(ω)·max_a u(ω,θ,a).
    pub fn full_information_value(&self, belief: &[f64], theta: usize) -> f64 {
        belief
            .iter()
            .enumerate()
            .map(|(w, p)| {
                p * (0..self.n_actions()).map(|a| self.utility(w, theta, a)).fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    /// The buyer's value of leaving before any interaction.
    pub fn outside_option(&self, ty: BuyerType) -> Result<f64> {
        let belief = self.conditional_omega(ty)?;
        Ok(self.best_expected_utility(belief.probs(), ty.theta))
    }

    /// Value of full information over the outside option, δ(θ,b).
    pub fn surplus(&self, ty: BuyerType) -> Result<f64> {
        let belief = self.conditional_omega(ty)?;
        let full = self.full_information_value(belief.probs(), ty.theta);
        Ok((full - self.best_expected_utility(belief.probs(), ty.theta)).max(0.0))
    }

    /// Largest |μ(ω,θ,b) − μ(ω)·μ(θ,b)| over all triples.
    pub fn independence_gap(&self) -> f64 {
        let omega = self.marginal_omega();
        let mut gap: f64 = 0.0;
        for ty in self.types() {
            let mass: f64 = (0..self.n_omega()).map(|w| self.prior(w, ty.theta, ty.budget)).sum();
            for (w, pw) in omega.iter().enumerate() {
                gap = gap.max((self.prior(w, ty.theta, ty.budget) - pw * mass).abs());
            }
        }
        gap
    }

    pub fn is_independent(&self, tol: f64) -> bool {
        self.independence_gap() <= tol
    }

    /// Same problem with the budget axis collapsed to one public level `b`.
    pub fn with_public_budget(&self, budget: f64) -> Result<Self> {
        if !budget.is_finite() || budget < 0.0 {
            return Err(Error::InvalidParameter(format!("public budget {budget} must be >= 0")));
        }
        let mut prior = Vec::with_capacity(self.n_omega() * self.n_theta());
        for w in 0..self.n_omega() {
            for t in 0..self.n_theta() {
                prior.push((0..self.n_budgets()).map(|b| self.prior(w, t, b)).sum());
            }
        }
        Self::new_unchecked(
            self.omega_labels.clone(),
            self.theta_labels.clone(),
            self.action_labels.clone(),
            vec![budget],
            prior,
            self.utility.clone(),
            self.seller_budget,
        )
    }

    /// Same shape with a different prior (dense `[ω][θ][b]`).
    pub fn with_prior(&self, prior: Vec<f64>) -> Result<Self> {
        Self::new_unchecked(
            self.omega_labels.clone(),
            self.theta_labels.clone(),
            self.action_labels.clone(),
            self.budget_levels.clone(),
            prior,
            self.utility.clone(),
            self.seller_budget,
        )
    }

    pub fn with_seller_budget(&self, seller_budget: f64) -> Self {
        Self { seller_budget, ..self.clone() }
    }

    /// The revenue cap Σ μ(θ,b)·min(b, δ(θ,b)) over positive-mass types.
    pub fn revenue_cap(&self) -> f64 {
        Beliefs::from_instance(self).revenue_cap(self, 0.0)
    }

    /// Canonical treasure-box problem: two keys, one correct; type θ values
    /// the prize at z_θ = (120, 80) and holds budget (50, 100).
    pub fn treasure_box() -> Self {
        Self::treasure_box_with(120.0, 80.0, 50.0, 100.0, 0.0)
    }

    /// Treasure box with custom prize values, budgets and seller budget.
    /// Budgets must differ; the type holding the smaller one comes first in
    /// the budget-level order.
    pub fn treasure_box_with(z0: f64, z1: f64, b0: f64, b1: f64, seller_budget: f64) -> Self {
        let labels = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let (levels, b_of) = if b0 <= b1 { (vec![b0, b1], [0usize, 1]) } else { (vec![b1, b0], [1usize, 0]) };
        let levels = if b0 == b1 { vec![b0] } else { levels };
        let nb = levels.len();
        let b_of = if nb == 1 { [0, 0] } else { b_of };
        let mut prior = vec![0.0; 2 * 2 * nb];
        for w in 0..2 {
            for t in 0..2 {
                prior[(w * 2 + t) * nb + b_of[t]] = 0.25;
            }
        }
        let z = [z0, z1];
        let mut utility = vec![0.0; 8];
        for w in 0..2 {
            for t in 0..2 {
                for a in 0..2 {
                    utility[(w * 2 + t) * 2 + a] = if w == a { z[t] } else { 0.0 };
                }
            }
        }
        Self::new_unchecked(labels(2), labels(2), labels(2), levels, prior, utility, seller_budget)
            .expect("treasure box dimensions are consistent")
    }
}

fn find_label(labels: &[String], label: &str, kind: &'static str) -> Result<usize> {
    labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownLabel { kind, label: label.to_string() })
}

pub(crate) fn fmt_money(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Bayes update: Pr(ω|σ) ∝ prior(ω)·kernel(ω,σ). `kernel` is indexed `[ω][σ]`
/// with `n_signals` columns.
pub fn bayes_update(prior: &Posterior, kernel: &[f64], n_signals: usize, signal: usize) -> Result<Posterior> {
    if kernel.len() != prior.len() * n_signals || signal >= n_signals {
        return Err(Error::ShapeMismatch("kernel does not match prior and signal count".into()));
    }
    let weights: Vec<f64> = prior.probs().iter().enumerate().map(|(w, p)| p * kernel[w * n_signals + signal]).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::UnreachableSignal(signal));
    }
    Ok(Posterior(weights.into_iter().map(|x| x / total).collect()))
}

/// The probability measure that LP constraints and verification run under:
/// per-type masses, the joint μ(ω,θ,b) used for revenue, and the conditional
/// beliefs μ(ω|θ,b) used for buyer utilities. For a known prior these are
/// consistent; the sampled pipeline builds them from two different sample
/// sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Beliefs {
    n_omega: usize,
    type_mass: Vec<f64>,
    /// Indexed `[type][ω]`.
    joint: Vec<f64>,
    conditional: Vec<Option<Posterior>>,
}

impl Beliefs {
    pub fn from_instance(instance: &Instance) -> Self {
        let n_omega = instance.n_omega();
        let mut joint = Vec::with_capacity(instance.n_types() * n_omega);
        let mut type_mass = Vec::with_capacity(instance.n_types());
        let mut conditional = Vec::with_capacity(instance.n_types());
        for ty in instance.types() {
            let row: Vec<f64> = (0..n_omega).map(|w| instance.prior(w, ty.theta, ty.budget)).collect();
            let mass: f64 = row.iter().sum();
            type_mass.push(mass);
            conditional.push((mass > 0.0).then(|| Posterior(row.iter().map(|x| x / mass).collect())));
            joint.extend(row);
        }
        Self { n_omega, type_mass, joint, conditional }
    }

    /// Assembles beliefs from parts. Types with `None` conditionals are
    /// treated as inactive.
    pub fn from_parts(n_omega: usize, joint: Vec<f64>, conditional: Vec<Option<Posterior>>) -> Result<Self> {
        if joint.len() != conditional.len() * n_omega {
            return Err(Error::ShapeMismatch("joint and conditional sizes disagree".into()));
        }
        if conditional.iter().flatten().any(|p| p.len() != n_omega) {
            return Err(Error::ShapeMismatch("conditional length differs from |Ω|".into()));
        }
        let type_mass = joint.chunks(n_omega).map(|c| c.iter().sum()).collect();
        Ok(Self { n_omega, type_mass, joint, conditional })
    }

    pub fn n_types(&self) -> usize {
        self.type_mass.len()
    }

    pub fn n_omega(&self) -> usize {
        self.n_omega
    }

    pub fn mass(&self, type_index: usize) -> f64 {
        self.type_mass[type_index]
    }

    pub fn joint(&self, type_index: usize, omega: usize) -> f64 {
        self.joint[type_index * self.n_omega + omega]
    }

    pub fn conditional(&self, type_index: usize) -> Option<&Posterior> {
        self.conditional[type_index].as_ref()
    }

    pub fn is_active(&self, type_index: usize) -> bool {
        self.conditional[type_index].is_some()
    }

    /// Flat indices of types that take part in constraints.
    pub fn active_types(&self) -> Vec<usize> {
        (0..self.n_types()).filter(|&i| self.is_active(i)).collect()
    }

    pub(crate) fn check_shape(&self, instance: &Instance) -> Result<()> {
        if self.n_omega != instance.n_omega() || self.n_types() != instance.n_types() {
            return Err(Error::ShapeMismatch(format!(
                "beliefs cover {} signals × {} types, instance has {} × {}",
                self.n_omega,
                self.n_types(),
                instance.n_omega(),
                instance.n_types()
            )));
        }
        Ok(())
    }

    /// Σ_τ mass(τ)·min(b_τ, δ_τ + ε), with δ under the conditional belief.
    pub fn revenue_cap(&self, instance: &Instance, eps: f64) -> f64 {
        self.active_types()
            .into_iter()
            .map(|i| {
                let ty = instance.type_at(i);
                let belief = self.conditional(i).expect("active").probs();
                let delta = instance.full_information_value(belief, ty.theta)
                    - instance.best_expected_utility(belief, ty.theta);
                self.mass(i) * instance.budget(ty.budget).min(delta.max(0.0) + eps)
            })
            .sum()
    }
}
