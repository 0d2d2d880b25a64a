//! Consulting mechanisms: representation, exact evaluation, and the linear
//! programs that compute revenue-optimal ones.
//!
//! Every mechanism kind reduces to a *menu*: for each report the seller runs
//! a signaling scheme whose signals carry a recommended action and a net
//! transfer. Direct payment and deposit-and-return attach the same transfer
//! to every signal; probabilistic return attaches `b` to `[a,+]` signals and
//! `-M` to `[a,-]` signals. Utilities, revenue and verification all run on
//! that menu view.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::lpcore::{LinearProgram, Relation, Sense, Status, Var};
use crate::model::{Beliefs, BuyerType, Instance};
use crate::{verify, PROB_TOL, SOLVER_TOL};

/// Kernel entries below this are treated as floating-point dust.
pub const KERNEL_DUST: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MechanismKind {
    DirectPayment,
    DepositReturn,
    SingleRound,
    ProbReturn,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DirectPayment => "dirp",
            Self::DepositReturn => "depr",
            Self::SingleRound => "single-round",
            Self::ProbReturn => "probr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dirp" => Some(Self::DirectPayment),
            "depr" => Some(Self::DepositReturn),
            "single-round" => Some(Self::SingleRound),
            "probr" => Some(Self::ProbReturn),
            _ => None,
        }
    }
}

/// Return indicator attached to a probabilistic-return recommendation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Indicator {
    /// No return: the buyer forfeits the deposit.
    Pay,
    /// The deposit plus the seller budget is returned.
    Refund,
}

impl Indicator {
    pub fn symbol(self) -> &'static str {
        match self {
            Self::Pay => "+",
            Self::Refund => "-",
        }
    }
}

/// Publicly known budget; one payment and one recommendation policy per θ.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectPaymentMechanism {
    pub public_budget: f64,
    /// t_θ.
    pub payment: Vec<f64>,
    /// p_θ(ω,a), each indexed `[ω][a]`.
    pub kernel: Vec<Vec<f64>>,
}

/// Per (θ,b): net payment after the returned deposit, and a recommendation
/// policy. Also carries single-round mechanisms, which charge the same
/// amount directly without a deposit.
#[derive(Clone, Debug, PartialEq)]
pub struct DepositReturnMechanism {
    /// t_{θ,b} by flat type index.
    pub payment: Vec<f64>,
    /// p_{θ,b}(ω,a) by flat type index, each indexed `[ω][a]`.
    pub kernel: Vec<Vec<f64>>,
}

/// Per (θ,b): joint probabilities of recommending `a` with indicator `+`
/// (deposit kept, net transfer `b`) or `-` (deposit plus `M` returned, net
/// transfer `-M`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbReturnMechanism {
    pub seller_budget: f64,
    /// p⁺_{θ,b}(ω,a) by flat type index, each indexed `[ω][a]`.
    pub pay: Vec<Vec<f64>>,
    /// p⁻_{θ,b}(ω,a).
    pub refund: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mechanism {
    DirectPayment(DirectPaymentMechanism),
    DepositReturn(DepositReturnMechanism),
    SingleRound(DepositReturnMechanism),
    ProbReturn(ProbReturnMechanism),
}

/// How a buyer chooses actions after a report.
#[derive(Clone, Debug, PartialEq)]
pub enum Deviation {
    /// Follow every recommendation.
    Obedient,
    /// Play `map[a]` when recommended `a`.
    Actions(Vec<usize>),
    /// Probabilistic return only: separate maps for `+` and `-` signals.
    Signed { pay: Vec<usize>, refund: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct MechanismSolution {
    pub mechanism: Mechanism,
    /// Exact expected revenue of `mechanism`.
    pub revenue: f64,
    /// Objective value reported by the linear program.
    pub lp_objective: f64,
    /// Truthful obedient utility U_{θ,b}(θ,b) per positive-mass type. For
    /// direct payment the budget index refers to the single public level.
    pub utilities: Vec<(BuyerType, f64)>,
}

impl Mechanism {
    pub fn kind(&self) -> MechanismKind {
        match self {
            Self::DirectPayment(_) => MechanismKind::DirectPayment,
            Self::DepositReturn(_) => MechanismKind::DepositReturn,
            Self::SingleRound(_) => MechanismKind::SingleRound,
            Self::ProbReturn(_) => MechanismKind::ProbReturn,
        }
    }

    /// Mechanism that reveals nothing and charges nothing.
    pub fn zero(kind: MechanismKind, instance: &Instance) -> Self {
        let (no, na) = (instance.n_omega(), instance.n_actions());
        let flat = {
            let mut k = vec![0.0; no * na];
            for w in 0..no {
                k[w * na] = 1.0;
            }
            k
        };
        let none = vec![0.0; no * na];
        match kind {
            MechanismKind::DirectPayment => Self::DirectPayment(DirectPaymentMechanism {
                public_budget: instance.budget_levels().first().copied().unwrap_or(0.0),
                payment: vec![0.0; instance.n_theta()],
                kernel: vec![flat; instance.n_theta()],
            }),
            MechanismKind::DepositReturn | MechanismKind::SingleRound => {
                let m = DepositReturnMechanism {
                    payment: vec![0.0; instance.n_types()],
                    kernel: vec![flat; instance.n_types()],
                };
                if kind == MechanismKind::DepositReturn {
                    Self::DepositReturn(m)
                } else {
                    Self::SingleRound(m)
                }
            }
            MechanismKind::ProbReturn => {
                // Forfeiting a zero deposit only exists for zero budgets, so the
                // zero mechanism returns nothing and charges b; callers wanting
                // a transfer-free probabilistic mechanism should use M = 0 and
                // full refund.
                Self::ProbReturn(ProbReturnMechanism {
                    seller_budget: instance.seller_budget(),
                    pay: vec![none.clone(); instance.n_types()],
                    refund: vec![flat; instance.n_types()],
                })
            }
        }
    }

    /// Full revelation (recommend argmax_a u(ω,θ,a)) at the given payments.
    /// `payment` is per θ for direct payment and per flat type index
    /// otherwise.
    pub fn full_revelation(kind: MechanismKind, instance: &Instance, payment: Vec<f64>) -> Result<Self> {
        let reveal = |theta: usize| {
            let (no, na) = (instance.n_omega(), instance.n_actions());
            let mut k = vec![0.0; no * na];
            for w in 0..no {
                let best = (0..na)
                    .max_by(|&a, &b| {
                        instance
                            .utility(w, theta, a)
                            .partial_cmp(&instance.utility(w, theta, b))
                            .expect("finite utilities")
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty action set");
                k[w * na + best] = 1.0;
            }
            k
        };
        match kind {
            MechanismKind::DirectPayment => {
                if payment.len() != instance.n_theta() {
                    return Err(Error::ShapeMismatch("one payment per θ expected".into()));
                }
                Ok(Self::DirectPayment(DirectPaymentMechanism {
                    public_budget: *instance.budget_levels().last().expect("budget levels"),
                    payment,
                    kernel: (0..instance.n_theta()).map(reveal).collect(),
                }))
            }
            MechanismKind::DepositReturn | MechanismKind::SingleRound => {
                if payment.len() != instance.n_types() {
                    return Err(Error::ShapeMismatch("one payment per (θ,b) expected".into()));
                }
                let m =
                    DepositReturnMechanism { payment, kernel: instance.types().map(|ty| reveal(ty.theta)).collect() };
                Ok(if kind == MechanismKind::DepositReturn { Self::DepositReturn(m) } else { Self::SingleRound(m) })
            }
            MechanismKind::ProbReturn => {
                let dep =
                    DepositReturnMechanism { payment, kernel: instance.types().map(|ty| reveal(ty.theta)).collect() };
                Ok(Self::ProbReturn(dep.to_prob_return(instance)?))
            }
        }
    }
}

impl DepositReturnMechanism {
    /// Replicates each fixed net payment t as a lottery: keep the deposit
    /// with probability λ = (t+M)/(b+M), otherwise refund b+M. Recommendation
    /// marginals are unchanged and the expected transfer is exactly t.
    pub fn to_prob_return(&self, instance: &Instance) -> Result<ProbReturnMechanism> {
        if self.payment.len() != instance.n_types() || self.kernel.len() != instance.n_types() {
            return Err(Error::ShapeMismatch("mechanism does not cover every (θ,b)".into()));
        }
        let m = instance.seller_budget();
        let mut pay = Vec::with_capacity(instance.n_types());
        let mut refund = Vec::with_capacity(instance.n_types());
        for (i, ty) in instance.types().enumerate() {
            let b = instance.budget(ty.budget);
            let t = self.payment[i];
            let lambda = if b + m > 0.0 { ((t + m) / (b + m)).clamp(0.0, 1.0) } else { 1.0 };
            pay.push(self.kernel[i].iter().map(|p| p * lambda).collect());
            refund.push(self.kernel[i].iter().map(|p| p * (1.0 - lambda)).collect());
        }
        Ok(ProbReturnMechanism { seller_budget: m, pay, refund })
    }
}

/// One recommendation of a menu entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Signal {
    pub action: usize,
    pub transfer: f64,
    pub indicator: Option<Indicator>,
}

/// The signaling scheme offered after one report.
#[derive(Clone, Debug)]
pub(crate) struct Offer {
    pub signals: Vec<Signal>,
    /// Indexed `[ω][signal]`.
    pub probs: Vec<f64>,
}

impl Offer {
    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }

    pub fn prob(&self, omega: usize, signal: usize) -> f64 {
        self.probs[omega * self.signals.len() + signal]
    }
}

/// Which reports a type may submit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Access {
    /// Public budget: every report is available.
    Always,
    /// Deposit of the reported budget: only b' ≤ b.
    DepositVerified,
    /// A single direct payment: any report whose payment fits the budget.
    PaymentBounded,
}

/// A mechanism viewed as a menu over the types of `instance`. For direct
/// payment, `instance` is the budget-collapsed problem.
pub(crate) struct MenuView<'a> {
    pub instance: Cow<'a, Instance>,
    pub offers: Vec<Offer>,
    pub access: Access,
    pub kind: MechanismKind,
    /// Fixed payment per report, for posted-payment kinds.
    pub posted: Option<Vec<f64>>,
}

fn check_kernel_shape(kernel: &[Vec<f64>], expected: usize, row: usize, what: &str) -> Result<()> {
    if kernel.len() != expected {
        return Err(Error::ShapeMismatch(format!("{what}: {} kernels, expected {expected}", kernel.len())));
    }
    if let Some(k) = kernel.iter().find(|k| k.len() != row) {
        return Err(Error::ShapeMismatch(format!("{what}: kernel of length {}, expected {row}", k.len())));
    }
    Ok(())
}

impl<'a> MenuView<'a> {
    pub fn new(mechanism: &Mechanism, instance: &'a Instance) -> Result<Self> {
        let (no, na) = (instance.n_omega(), instance.n_actions());
        let posted_offers = |payment: &[f64], kernel: &[Vec<f64>]| -> Vec<Offer> {
            payment
                .iter()
                .zip(kernel)
                .map(|(&t, k)| Offer {
                    signals: (0..na).map(|a| Signal { action: a, transfer: t, indicator: None }).collect(),
                    probs: k.clone(),
                })
                .collect()
        };
        match mechanism {
            Mechanism::DirectPayment(m) => {
                if m.payment.len() != instance.n_theta() {
                    return Err(Error::ShapeMismatch("direct payment: one payment per θ expected".into()));
                }
                check_kernel_shape(&m.kernel, instance.n_theta(), no * na, "direct payment")?;
                let collapsed = instance.with_public_budget(m.public_budget)?;
                Ok(Self {
                    instance: Cow::Owned(collapsed),
                    offers: posted_offers(&m.payment, &m.kernel),
                    access: Access::Always,
                    kind: MechanismKind::DirectPayment,
                    posted: Some(m.payment.clone()),
                })
            }
            Mechanism::DepositReturn(m) | Mechanism::SingleRound(m) => {
                if m.payment.len() != instance.n_types() {
                    return Err(Error::ShapeMismatch("one payment per (θ,b) expected".into()));
                }
                check_kernel_shape(&m.kernel, instance.n_types(), no * na, "deposit-return")?;
                let single = matches!(mechanism, Mechanism::SingleRound(_));
                Ok(Self {
                    instance: Cow::Borrowed(instance),
                    offers: posted_offers(&m.payment, &m.kernel),
                    access: if single { Access::PaymentBounded } else { Access::DepositVerified },
                    kind: mechanism.kind(),
                    posted: Some(m.payment.clone()),
                })
            }
            Mechanism::ProbReturn(m) => {
                check_kernel_shape(&m.pay, instance.n_types(), no * na, "probabilistic return (+)")?;
                check_kernel_shape(&m.refund, instance.n_types(), no * na, "probabilistic return (-)")?;
                let offers = instance
                    .types()
                    .enumerate()
                    .map(|(i, ty)| {
                        let b = instance.budget(ty.budget);
                        let mut signals = Vec::with_capacity(2 * na);
                        signals.extend((0..na).map(|a| Signal {
                            action: a,
                            transfer: b,
                            indicator: Some(Indicator::Pay),
                        }));
                        signals.extend((0..na).map(|a| Signal {
                            action: a,
                            transfer: -m.seller_budget,
                            indicator: Some(Indicator::Refund),
                        }));
                        let mut probs = Vec::with_capacity(no * 2 * na);
                        for w in 0..no {
                            probs.extend_from_slice(&m.pay[i][w * na..(w + 1) * na]);
                            probs.extend_from_slice(&m.refund[i][w * na..(w + 1) * na]);
                        }
                        Offer { signals, probs }
                    })
                    .collect();
                Ok(Self {
                    instance: Cow::Borrowed(instance),
                    offers,
                    access: Access::DepositVerified,
                    kind: MechanismKind::ProbReturn,
                    posted: None,
                })
            }
        }
    }

    /// Maps a type of the original instance to one of the view.
    pub fn view_type(&self, ty: BuyerType) -> BuyerType {
        match self.kind {
            MechanismKind::DirectPayment => BuyerType { theta: ty.theta, budget: 0 },
            _ => ty,
        }
    }

    pub fn can_report(&self, truth: usize, report: usize) -> bool {
        let inst = &self.instance;
        let b = inst.budget(inst.type_at(truth).budget);
        match self.access {
            Access::Always => true,
            Access::DepositVerified => inst.budget(inst.type_at(report).budget) <= b,
            Access::PaymentBounded => self.posted.as_ref().expect("posted payments")[report] <= b + SOLVER_TOL,
        }
    }

    /// Utility of a type with `belief` and signal `theta` that reports
    /// `report` and plays `choose(signal)`.
    pub fn utility_with(
        &self,
        belief: &[f64],
        theta: usize,
        report: usize,
        mut choose: impl FnMut(&Signal) -> usize,
    ) -> f64 {
        let offer = &self.offers[report];
        let mut total = 0.0;
        for (s, sig) in offer.signals.iter().enumerate() {
            let a = choose(sig);
            for (w, q) in belief.iter().enumerate() {
                let p = offer.prob(w, s);
                if p != 0.0 {
                    total += q * p * (self.instance.utility(w, theta, a) - sig.transfer);
                }
            }
        }
        total
    }

    pub fn obedient_utility(&self, belief: &[f64], theta: usize, report: usize) -> f64 {
        self.utility_with(belief, theta, report, |s| s.action)
    }

    /// Utility under the best deviation, chosen per recommendation.
    pub fn best_utility(&self, belief: &[f64], theta: usize, report: usize) -> f64 {
        let offer = &self.offers[report];
        let na = self.instance.n_actions();
        offer
            .signals
            .iter()
            .enumerate()
            .map(|(s, sig)| {
                (0..na)
                    .map(|a| {
                        belief
                            .iter()
                            .enumerate()
                            .map(|(w, q)| q * offer.prob(w, s) * (self.instance.utility(w, theta, a) - sig.transfer))
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    /// Σ_{τ,ω} μ(ω,τ) Σ_s p_τ(ω,s)·transfer_s over active types.
    pub fn revenue(&self, beliefs: &Beliefs) -> f64 {
        beliefs
            .active_types()
            .into_iter()
            .map(|i| {
                let offer = &self.offers[i];
                (0..self.instance.n_omega())
                    .map(|w| {
                        let mass = beliefs.joint(i, w);
                        offer
                            .signals
                            .iter()
                            .enumerate()
                            .map(|(s, sig)| mass * offer.prob(w, s) * sig.transfer)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Expected transfer of type `i` under its conditional belief.
    pub fn expected_transfer(&self, belief: &[f64], report: usize) -> f64 {
        let offer = &self.offers[report];
        belief
            .iter()
            .enumerate()
            .map(|(w, q)| {
                q * offer.signals.iter().enumerate().map(|(s, sig)| offer.prob(w, s) * sig.transfer).sum::<f64>()
            })
            .sum()
    }
}

/// Exact expected revenue under the instance prior, for truthful obedient
/// buyers.
pub fn expected_revenue(mechanism: &Mechanism, instance: &Instance) -> Result<f64> {
    let view = MenuView::new(mechanism, instance)?;
    Ok(view.revenue(&Beliefs::from_instance(&view.instance)))
}

/// Exact expected revenue under arbitrary beliefs over the view's types.
pub fn expected_revenue_with(mechanism: &Mechanism, instance: &Instance, beliefs: &Beliefs) -> Result<f64> {
    let view = MenuView::new(mechanism, instance)?;
    beliefs.check_shape(&view.instance)?;
    Ok(view.revenue(beliefs))
}

/// Expected utility of a buyer of type `truth` who reports `report` and then
/// plays according to `deviation`.
pub fn buyer_utility(
    mechanism: &Mechanism,
    instance: &Instance,
    truth: BuyerType,
    report: BuyerType,
    deviation: &Deviation,
) -> Result<f64> {
    let view = MenuView::new(mechanism, instance)?;
    let (truth, report) = (view.view_type(truth), view.view_type(report));
    let vi = &view.instance;
    if truth.theta >= vi.n_theta()
        || report.theta >= vi.n_theta()
        || truth.budget >= vi.n_budgets()
        || report.budget >= vi.n_budgets()
    {
        return Err(Error::UnknownLabel { kind: "type", label: format!("{truth:?}/{report:?}") });
    }
    let belief = vi.conditional_omega(truth)?;
    let (ti, ri) = (vi.type_index(truth), vi.type_index(report));
    if !view.can_report(ti, ri) {
        return Err(Error::UnaffordableReport { truth: vi.type_key(truth), report: vi.type_key(report) });
    }
    let na = vi.n_actions();
    let check = |map: &[usize]| -> Result<()> {
        if map.len() != na || map.iter().any(|&a| a >= na) {
            return Err(Error::ShapeMismatch("deviation must map every action to an action".into()));
        }
        Ok(())
    };
    match deviation {
        Deviation::Obedient => {}
        Deviation::Actions(map) => check(map)?,
        Deviation::Signed { pay, refund } => {
            check(pay)?;
            check(refund)?;
        }
    }
    Ok(view.utility_with(belief.probs(), truth.theta, ri, |sig| match deviation {
        Deviation::Obedient => sig.action,
        Deviation::Actions(map) => map[sig.action],
        Deviation::Signed { pay, refund } => match sig.indicator {
            Some(Indicator::Refund) => refund[sig.action],
            _ => pay[sig.action],
        },
    }))
}

/// Optimal consulting mechanism with direct payment for a publicly known
/// budget. Requires independent signals.
pub fn solve_cm_dirp(instance: &Instance, public_budget: f64) -> Result<MechanismSolution> {
    require_independent(instance)?;
    let collapsed = instance.with_public_budget(public_budget)?;
    let beliefs = Beliefs::from_instance(&collapsed);
    let (posted, objective) = solve_posted(&collapsed, &beliefs, 0.0, IcScope::AllReports)?;
    let mechanism = Mechanism::DirectPayment(DirectPaymentMechanism {
        public_budget,
        payment: posted.payment,
        kernel: posted.kernel,
    });
    finalize(mechanism, instance, &beliefs, 0.0, objective)
}

/// Optimal consulting mechanism with deposit and return for a private
/// budget. Requires independent signals.
pub fn solve_cm_depr(instance: &Instance) -> Result<MechanismSolution> {
    require_independent(instance)?;
    best_deposit_return(instance)
}

/// The deposit-and-return LP run under each type's own conditional belief,
/// without the independence precondition. On correlated instances this is
/// the best mechanism among deposit-and-return consulting mechanisms, a
/// benchmark that probabilistic return must weakly dominate.
pub fn best_deposit_return(instance: &Instance) -> Result<MechanismSolution> {
    let beliefs = Beliefs::from_instance(instance);
    let (posted, objective) = solve_posted(instance, &beliefs, -instance.seller_budget(), IcScope::DepositVerified)?;
    finalize(Mechanism::DepositReturn(posted), instance, &beliefs, 0.0, objective)
}

/// Best mechanism with one direct payment and an unverified budget report.
/// Requires independent signals.
///
/// Exact affordability-conditional incentive constraints are disjunctive,
/// so the program imposes incentive compatibility against every report; the
/// resulting mechanism is incentive compatible under the true affordability
/// rule as well.
pub fn solve_single_round(instance: &Instance) -> Result<MechanismSolution> {
    require_independent(instance)?;
    let beliefs = Beliefs::from_instance(instance);
    let (posted, objective) = solve_posted(instance, &beliefs, -instance.seller_budget(), IcScope::AllReports)?;
    finalize(Mechanism::SingleRound(posted), instance, &beliefs, 0.0, objective)
}

/// Optimal consulting mechanism with probabilistic return. Signals may be
/// correlated.
pub fn solve_cm_probr(instance: &Instance) -> Result<MechanismSolution> {
    let beliefs = Beliefs::from_instance(instance);
    let (mech, objective) = solve_prob_return(instance, &beliefs, 0.0)?;
    finalize(Mechanism::ProbReturn(mech), instance, &beliefs, 0.0, objective)
}

/// Probabilistic-return program with every incentive, participation and
/// obedience constraint relaxed by `eps`, under arbitrary beliefs.
pub fn solve_prob_return_relaxed(instance: &Instance, beliefs: &Beliefs, eps: f64) -> Result<MechanismSolution> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("ε = {eps} must be finite and >= 0")));
    }
    beliefs.check_shape(instance)?;
    let (mech, objective) = solve_prob_return(instance, beliefs, eps)?;
    finalize(Mechanism::ProbReturn(mech), instance, beliefs, eps, objective)
}

fn require_independent(instance: &Instance) -> Result<()> {
    let gap = instance.independence_gap();
    if gap > PROB_TOL {
        return Err(Error::DependentSignals(gap));
    }
    Ok(())
}

fn finalize(
    mechanism: Mechanism,
    instance: &Instance,
    beliefs: &Beliefs,
    eps: f64,
    lp_objective: f64,
) -> Result<MechanismSolution> {
    let view = MenuView::new(&mechanism, instance)?;
    let revenue = view.revenue(beliefs);
    if (revenue - lp_objective).abs() > SOLVER_TOL * lp_objective.abs().max(1.0) {
        return Err(Error::Internal(format!(
            "revenue {revenue} of the rounded mechanism drifted from the LP objective {lp_objective}"
        )));
    }
    let utilities = beliefs
        .active_types()
        .into_iter()
        .map(|i| {
            let ty = view.instance.type_at(i);
            let belief = beliefs.conditional(i).expect("active").probs();
            (ty, view.obedient_utility(belief, ty.theta, i))
        })
        .collect();
    let opts = verify::VerifyOptions::with_epsilon(eps);
    let report = verify::verify_all_with(&mechanism, instance, Some(beliefs), &opts)?;
    if !report.passed {
        return Err(Error::Internal(format!("solver output failed verification: {}", report.summary())));
    }
    Ok(MechanismSolution { mechanism, revenue, lp_objective, utilities })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum IcScope {
    /// Reports with b' ≤ b.
    DepositVerified,
    AllReports,
}

fn interpret_status(status: Status) -> Result<()> {
    match status {
        Status::Optimal => Ok(()),
        Status::Infeasible => Err(Error::Internal("mechanism LP reported infeasible".into())),
        Status::Unbounded => Err(Error::Internal("mechanism LP reported unbounded".into())),
    }
}

/// Zeroes kernel dust and renormalizes each row of `row_len` entries.
fn clamp_rows(values: &mut [f64], row_len: usize) {
    for row in values.chunks_mut(row_len) {
        for x in row.iter_mut() {
            if *x < KERNEL_DUST {
                *x = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
}

/// The posted-payment consulting-mechanism LP: obedience per (a, a'),
/// incentive compatibility with z variables linearizing the misreporter's
/// best response, participation, and t ≤ b.
fn solve_posted(
    instance: &Instance,
    beliefs: &Beliefs,
    lower: f64,
    scope: IcScope,
) -> Result<(DepositReturnMechanism, f64)> {
    let (no, na) = (instance.n_omega(), instance.n_actions());
    let active = beliefs.active_types();
    let mut lp = LinearProgram::new(Sense::Maximize);
    let mut t_var: Vec<Option<Var>> = vec![None; instance.n_types()];
    let mut p_var: Vec<Vec<Var>> = vec![Vec::new(); instance.n_types()];
    for &r in &active {
        let b = instance.budget(instance.type_at(r).budget);
        t_var[r] = Some(lp.add_variable(format!("t_{r}"), lower.min(b), b)?);
        let mut ps = Vec::with_capacity(no * na);
        for w in 0..no {
            for a in 0..na {
                ps.push(lp.add_variable(format!("p_{r}_{w}_{a}"), 0.0, 1.0)?);
            }
        }
        for w in 0..no {
            let row: Vec<(Var, f64)> = (0..na).map(|a| (ps[w * na + a], 1.0)).collect();
            lp.add_constraint(format!("row_{r}_{w}"), &row, Relation::Eq, 1.0)?;
        }
        p_var[r] = ps;
    }

    for &i in &active {
        let ty = instance.type_at(i);
        let q = beliefs.conditional(i).expect("active").probs();
        let theta = ty.theta;
        let t_i = t_var[i].expect("active");

        for a in 0..na {
            for alt in 0..na {
                if alt == a {
                    continue;
                }
                let terms: Vec<(Var, f64)> = (0..no)
                    .map(|w| {
                        (p_var[i][w * na + a], q[w] * (instance.utility(w, theta, a) - instance.utility(w, theta, alt)))
                    })
                    .collect();
                lp.add_constraint(format!("ob_{i}_{a}_{alt}"), &terms, Relation::Ge, 0.0)?;
            }
        }

        // Σ_{ω,a} μ(ω|τ) p_τ(ω,a) u(ω,θ,a) − t_τ
        let mut truthful: Vec<(Var, f64)> = Vec::with_capacity(no * na + 1);
        for w in 0..no {
            for a in 0..na {
                truthful.push((p_var[i][w * na + a], q[w] * instance.utility(w, theta, a)));
            }
        }
        truthful.push((t_i, -1.0));

        let outside = instance.best_expected_utility(q, theta);
        lp.add_constraint(format!("ir_{i}"), &truthful, Relation::Ge, outside)?;

        for &r in &active {
            if r == i {
                continue;
            }
            let rb = instance.type_at(r).budget;
            if scope == IcScope::DepositVerified && instance.budget(rb) > instance.budget(ty.budget) {
                continue;
            }
            let mut ic = truthful.clone();
            for a in 0..na {
                let z = lp.add_variable(format!("z_{i}_{r}_{a}"), f64::NEG_INFINITY, f64::INFINITY)?;
                for alt in 0..na {
                    let mut terms: Vec<(Var, f64)> =
                        (0..no).map(|w| (p_var[r][w * na + a], -q[w] * instance.utility(w, theta, alt))).collect();
                    terms.push((z, 1.0));
                    lp.add_constraint(format!("zdef_{i}_{r}_{a}_{alt}"), &terms, Relation::Ge, 0.0)?;
                }
                ic.push((z, -1.0));
            }
            ic.push((t_var[r].expect("active"), 1.0));
            lp.add_constraint(format!("ic_{i}_{r}"), &ic, Relation::Ge, 0.0)?;
        }
    }

    let objective: Vec<(Var, f64)> = active.iter().map(|&i| (t_var[i].expect("active"), beliefs.mass(i))).collect();
    lp.set_objective(Sense::Maximize, &objective)?;
    let sol = lp.solve()?;
    interpret_status(sol.status)?;

    let mut payment = vec![0.0; instance.n_types()];
    let mut kernel = Mechanism::zero(MechanismKind::DepositReturn, instance);
    let Mechanism::DepositReturn(ref mut defaults) = kernel else { unreachable!() };
    for &r in &active {
        payment[r] = sol.value(t_var[r].expect("active"));
        let mut k: Vec<f64> = p_var[r].iter().map(|&v| sol.value(v)).collect();
        clamp_rows(&mut k, na);
        defaults.kernel[r] = k;
    }
    let kernel = std::mem::take(&mut defaults.kernel);
    Ok((DepositReturnMechanism { payment, kernel }, sol.objective))
}

/// The probabilistic-return LP over `p⁺`, `p⁻`; `eps = 0` is the exact
/// program and `eps > 0` its sample-based relaxation.
///
/// U_τ(ρ) is the misreport utility under the best per-signal deviation,
/// bounded below through z variables; the truthful diagonal U_τ(τ) is capped
/// by the obedient utility V_τ (plus ε), which enforces obedience. Incentive
/// and participation rows compare V_τ rather than U_τ(τ): the two coincide at
/// ε = 0, and for ε > 0 this keeps the relaxation at ε rather than 2ε for a
/// buyer who follows the recommendation.
fn solve_prob_return(instance: &Instance, beliefs: &Beliefs, eps: f64) -> Result<(ProbReturnMechanism, f64)> {
    let (no, na) = (instance.n_omega(), instance.n_actions());
    let m = instance.seller_budget();
    let active = beliefs.active_types();
    let mut lp = LinearProgram::new(Sense::Maximize);
    let mut plus: Vec<Vec<Var>> = vec![Vec::new(); instance.n_types()];
    let mut minus: Vec<Vec<Var>> = vec![Vec::new(); instance.n_types()];
    for &r in &active {
        for w in 0..no {
            for a in 0..na {
                plus[r].push(lp.add_variable(format!("pp_{r}_{w}_{a}"), 0.0, 1.0)?);
            }
        }
        for w in 0..no {
            for a in 0..na {
                minus[r].push(lp.add_variable(format!("pm_{r}_{w}_{a}"), 0.0, 1.0)?);
            }
        }
        for w in 0..no {
            let row: Vec<(Var, f64)> =
                (0..na).flat_map(|a| [(plus[r][w * na + a], 1.0), (minus[r][w * na + a], 1.0)]).collect();
            lp.add_constraint(format!("row_{r}_{w}"), &row, Relation::Eq, 1.0)?;
        }
    }
    let deposit = |r: usize| instance.budget(instance.type_at(r).budget);

    for &i in &active {
        let ty = instance.type_at(i);
        let theta = ty.theta;
        let b = deposit(i);
        let q = beliefs.conditional(i).expect("active").probs();

        // V_τ = Σ_{a,ω,∘} μ(ω|τ) p°_τ(ω,a) (u(ω,θ,a) − t°)
        let mut obedient: Vec<(Var, f64)> = Vec::with_capacity(2 * no * na);
        for w in 0..no {
            for a in 0..na {
                let u = instance.utility(w, theta, a);
                obedient.push((plus[i][w * na + a], q[w] * (u - b)));
                obedient.push((minus[i][w * na + a], q[w] * (u + m)));
            }
        }

        let mut u_var: Vec<(usize, Var)> = Vec::new();
        for &r in &active {
            if deposit(r) > b {
                continue;
            }
            let u_tr = lp.add_variable(format!("U_{i}_{r}"), f64::NEG_INFINITY, f64::INFINITY)?;
            let mut sum: Vec<(Var, f64)> = vec![(u_tr, 1.0)];
            for (sign, kernel, transfer) in [("p", &plus[r], deposit(r)), ("m", &minus[r], -m)] {
                for a in 0..na {
                    let z = lp.add_variable(format!("z{sign}_{i}_{r}_{a}"), f64::NEG_INFINITY, f64::INFINITY)?;
                    for alt in 0..na {
                        let mut terms: Vec<(Var, f64)> = (0..no)
                            .map(|w| (kernel[w * na + a], -q[w] * (instance.utility(w, theta, alt) - transfer)))
                            .collect();
                        terms.push((z, 1.0));
                        lp.add_constraint(format!("z{sign}def_{i}_{r}_{a}_{alt}"), &terms, Relation::Ge, 0.0)?;
                    }
                    sum.push((z, -1.0));
                }
            }
            lp.add_constraint(format!("Udef_{i}_{r}"), &sum, Relation::Eq, 0.0)?;
            u_var.push((r, u_tr));
        }

        let diag = u_var.iter().find(|(r, _)| *r == i).expect("diagonal report").1;
        let mut ob = obedient.iter().map(|&(v, c)| (v, -c)).collect::<Vec<_>>();
        ob.push((diag, 1.0));
        lp.add_constraint(format!("ob_{i}"), &ob, Relation::Le, eps)?;

        let outside = instance.best_expected_utility(q, theta);
        lp.add_constraint(format!("ir_{i}"), &obedient, Relation::Ge, outside - eps)?;

        for &(r, u_tr) in &u_var {
            if r == i {
                continue;
            }
            let mut ic = obedient.clone();
            ic.push((u_tr, -1.0));
            lp.add_constraint(format!("ic_{i}_{r}"), &ic, Relation::Ge, -eps)?;
        }
    }

    let mut objective: Vec<(Var, f64)> = Vec::new();
    for &i in &active {
        let b = deposit(i);
        for w in 0..no {
            let mass = beliefs.joint(i, w);
            for a in 0..na {
                objective.push((plus[i][w * na + a], mass * b));
                objective.push((minus[i][w * na + a], -mass * m));
            }
        }
    }
    lp.set_objective(Sense::Maximize, &objective)?;
    let sol = lp.solve()?;
    interpret_status(sol.status)?;

    let Mechanism::ProbReturn(mut mech) = Mechanism::zero(MechanismKind::ProbReturn, instance) else { unreachable!() };
    for &r in &active {
        // Clamp over each full (ω) row of 2|A| entries.
        let mut joint: Vec<f64> = Vec::with_capacity(2 * no * na);
        for w in 0..no {
            joint.extend((0..na).map(|a| sol.value(plus[r][w * na + a])));
            joint.extend((0..na).map(|a| sol.value(minus[r][w * na + a])));
        }
        clamp_rows(&mut joint, 2 * na);
        let mut pp = vec![0.0; no * na];
        let mut pm = vec![0.0; no * na];
        for w in 0..no {
            pp[w * na..(w + 1) * na].copy_from_slice(&joint[w * 2 * na..w * 2 * na + na]);
            pm[w * na..(w + 1) * na].copy_from_slice(&joint[w * 2 * na + na..(w + 1) * 2 * na]);
        }
        mech.pay[r] = pp;
        mech.refund[r] = pm;
    }
    Ok((mech, sol.objective))
}
