//! Solver-free checks of incentive compatibility, participation, obedience,
//! budget feasibility and the revenue cap, by direct expectation.

use serde::Serialize;

use crate::error::Result;
use crate::mechanisms::{Mechanism, MenuView};
use crate::model::{Beliefs, Instance};
use crate::SOLVER_TOL;

/// Recommendations rarer than this are skipped by per-recommendation
/// obedience, where the posterior is numerically meaningless.
pub const MIN_RECOMMENDATION_PROB: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObedienceMode {
    /// Each positive-probability recommendation is a best response under the
    /// induced posterior.
    PerRecommendation,
    /// Obedience loses at most ε in expectation over recommendations.
    Aggregate,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// `None` picks per-recommendation at ε = 0 and aggregate otherwise.
    pub obedience: Option<ObedienceMode>,
}

impl VerifyOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    fn obedience_mode(&self) -> ObedienceMode {
        self.obedience.unwrap_or(if self.epsilon > 0.0 {
            ObedienceMode::Aggregate
        } else {
            ObedienceMode::PerRecommendation
        })
    }
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { epsilon: 0.0, tolerance: SOLVER_TOL, obedience: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: &'static str,
    pub passed: bool,
    /// Smallest slack found; `None` when the check has no constraints.
    pub worst_slack: Option<f64>,
    /// Identity of the constraint with the smallest slack.
    pub worst: Option<String>,
    pub tolerance: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ObedienceMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub mechanism: &'static str,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

impl VerificationReport {
    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check == name)
    }

    /// One-line description of the failing checks, or "all checks passed".
    pub fn summary(&self) -> String {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| {
                format!(
                    "{} (slack {:.3e} at {})",
                    c.check,
                    c.worst_slack.unwrap_or(f64::NAN),
                    c.worst.as_deref().unwrap_or("?")
                )
            })
            .collect();
        if failed.is_empty() {
            "all checks passed".to_string()
        } else {
            failed.join(", ")
        }
    }
}

/// Tracks the minimum slack over a family of constraints.
struct Worst {
    slack: Option<f64>,
    at: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Self { slack: None, at: None }
    }

    fn offer(&mut self, slack: f64, at: impl FnOnce() -> String) {
        // Adding zero turns -0.0 into 0.0 for stable output.
        let slack = slack + 0.0;
        if self.slack.is_none_or(|s| slack < s) {
            self.slack = Some(slack);
            self.at = Some(at());
        }
    }

    fn finish(self, check: &'static str, opts: &VerifyOptions, mode: Option<ObedienceMode>) -> CheckReport {
        CheckReport {
            check,
            passed: self.slack.is_none_or(|s| s >= -opts.tolerance),
            worst_slack: self.slack,
            worst: self.at,
            tolerance: opts.tolerance,
            epsilon: opts.epsilon,
            mode,
        }
    }
}

struct Context<'a> {
    view: MenuView<'a>,
    beliefs: Beliefs,
}

fn context<'a>(mech: &Mechanism, instance: &'a Instance, beliefs: Option<&Beliefs>) -> Result<Context<'a>> {
    let view = MenuView::new(mech, instance)?;
    let beliefs = match beliefs {
        Some(b) => {
            b.check_shape(&view.instance)?;
            b.clone()
        }
        None => Beliefs::from_instance(&view.instance),
    };
    Ok(Context { view, beliefs })
}

impl Context<'_> {
    fn key(&self, i: usize) -> String {
        let inst = &self.view.instance;
        inst.type_key(inst.type_at(i))
    }

    fn obedient(&self, i: usize) -> f64 {
        let theta = self.view.instance.type_at(i).theta;
        self.view.obedient_utility(self.beliefs.conditional(i).expect("active").probs(), theta, i)
    }

    fn ic(&self, opts: &VerifyOptions) -> CheckReport {
        let mut worst = Worst::new();
        let active = self.beliefs.active_types();
        for &i in &active {
            let q = self.beliefs.conditional(i).expect("active").probs();
            let theta = self.view.instance.type_at(i).theta;
            let truthful = self.obedient(i);
            for &r in &active {
                if r == i || !self.view.can_report(i, r) {
                    continue;
                }
                let slack = truthful + opts.epsilon - self.view.best_utility(q, theta, r);
                worst.offer(slack, || format!("{} reports {}", self.key(i), self.key(r)));
            }
        }
        worst.finish("ic", opts, None)
    }

    fn ir(&self, opts: &VerifyOptions) -> CheckReport {
        let mut worst = Worst::new();
        for i in self.beliefs.active_types() {
            let q = self.beliefs.conditional(i).expect("active").probs();
            let theta = self.view.instance.type_at(i).theta;
            let slack = self.obedient(i) + opts.epsilon - self.view.instance.best_expected_utility(q, theta);
            worst.offer(slack, || self.key(i));
        }
        worst.finish("ir", opts, None)
    }

    fn obedience(&self, opts: &VerifyOptions) -> CheckReport {
        let mode = opts.obedience_mode();
        let inst = &self.view.instance;
        let mut worst = Worst::new();
        for i in self.beliefs.active_types() {
            let q = self.beliefs.conditional(i).expect("active").probs();
            let theta = inst.type_at(i).theta;
            match mode {
                ObedienceMode::Aggregate => {
                    let slack = self.obedient(i) + opts.epsilon - self.view.best_utility(q, theta, i);
                    worst.offer(slack, || self.key(i));
                }
                ObedienceMode::PerRecommendation => {
                    let offer = &self.view.offers[i];
                    for (s, sig) in offer.signals.iter().enumerate() {
                        let weights: Vec<f64> = (0..inst.n_omega()).map(|w| q[w] * offer.prob(w, s)).collect();
                        let total: f64 = weights.iter().sum();
                        if total < MIN_RECOMMENDATION_PROB {
                            continue;
                        }
                        let posterior: Vec<f64> = weights.iter().map(|x| x / total).collect();
                        let follow = inst.expected_utility(&posterior, theta, sig.action);
                        for alt in 0..inst.n_actions() {
                            let slack = follow - inst.expected_utility(&posterior, theta, alt) + opts.epsilon;
                            worst.offer(slack, || {
                                let ind = sig.indicator.map(|x| format!(",{}", x.symbol())).unwrap_or_default();
                                format!(
                                    "{} recommended [{}{}] prefers {}",
                                    self.key(i),
                                    inst.action_labels()[sig.action],
                                    ind,
                                    inst.action_labels()[alt]
                                )
                            });
                        }
                    }
                }
            }
        }
        worst.finish("obedience", opts, Some(mode))
    }

    fn budget(&self, mech: &Mechanism, opts: &VerifyOptions) -> CheckReport {
        let inst = &self.view.instance;
        let mut worst = Worst::new();
        match mech {
            Mechanism::ProbReturn(p) => {
                // Transfers are b or -M by construction; only the refund size
                // can exceed what the seller holds.
                worst.offer(inst.seller_budget() - p.seller_budget, || "seller budget".to_string());
            }
            _ => {
                let payment = self.view.posted.as_ref().expect("posted payments");
                for (r, &t) in payment.iter().enumerate() {
                    let b = inst.budget(inst.type_at(r).budget);
                    worst.offer(b - t, || format!("{} pays above budget", self.key(r)));
                    worst.offer(t + inst.seller_budget(), || format!("{} refund above seller budget", self.key(r)));
                }
            }
        }
        worst.finish("budget", opts, None)
    }

    fn kernel(&self, opts: &VerifyOptions) -> CheckReport {
        let mut worst = Worst::new();
        let no = self.view.instance.n_omega();
        for (r, offer) in self.view.offers.iter().enumerate() {
            for w in 0..no {
                let row = &offer.probs[w * offer.n_signals()..(w + 1) * offer.n_signals()];
                if row.iter().any(|p| !p.is_finite()) {
                    worst.offer(f64::NEG_INFINITY, || format!("{} row {w} not finite", self.key(r)));
                    continue;
                }
                let total: f64 = row.iter().sum();
                worst.offer(-(total - 1.0).abs(), || format!("{} row {w} sums to {total}", self.key(r)));
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                worst.offer(lo, || format!("{} row {w} negative entry", self.key(r)));
                worst.offer(1.0 - hi, || format!("{} row {w} entry above 1", self.key(r)));
            }
        }
        worst.finish("kernel", opts, None)
    }

    /// Σ mass·E[transfer | type] against Σ mass·min(b, δ + ε), both under the
    /// conditional beliefs.
    fn revenue_cap(&self, opts: &VerifyOptions) -> CheckReport {
        let mut worst = Worst::new();
        let revenue: f64 = self
            .beliefs
            .active_types()
            .into_iter()
            .map(|i| {
                self.beliefs.mass(i) * self.view.expected_transfer(self.beliefs.conditional(i).unwrap().probs(), i)
            })
            .sum();
        let cap = self.beliefs.revenue_cap(&self.view.instance, opts.epsilon);
        worst.offer(cap - revenue, || format!("revenue {revenue} vs cap {cap}"));
        worst.finish("revenue-cap", opts, None)
    }
}

fn single(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
    run: impl FnOnce(&Context, &VerifyOptions) -> CheckReport,
) -> Result<CheckReport> {
    let ctx = context(mech, instance, beliefs)?;
    Ok(run(&ctx, opts))
}

pub fn check_ic(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
) -> Result<CheckReport> {
    single(mech, instance, beliefs, opts, |c, o| c.ic(o))
}

pub fn check_ir(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
) -> Result<CheckReport> {
    single(mech, instance, beliefs, opts, |c, o| c.ir(o))
}

pub fn check_obedience(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
) -> Result<CheckReport> {
    single(mech, instance, beliefs, opts, |c, o| c.obedience(o))
}

pub fn check_budget(mech: &Mechanism, instance: &Instance) -> Result<CheckReport> {
    single(mech, instance, None, &VerifyOptions::default(), |c, o| c.budget(mech, o))
}

pub fn check_kernel(mech: &Mechanism, instance: &Instance) -> Result<CheckReport> {
    single(mech, instance, None, &VerifyOptions::default(), |c, o| c.kernel(o))
}

pub fn check_revenue_cap(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
) -> Result<CheckReport> {
    single(mech, instance, beliefs, opts, |c, o| c.revenue_cap(o))
}

/// Every check against the instance's own prior at the default tolerance.
pub fn verify_all(mech: &Mechanism, instance: &Instance, epsilon: f64) -> Result<VerificationReport> {
    verify_all_with(mech, instance, None, &VerifyOptions::with_epsilon(epsilon))
}

/// Every check, optionally against beliefs other than the instance prior
/// (for direct payment, beliefs over the budget-collapsed types).
pub fn verify_all_with(
    mech: &Mechanism,
    instance: &Instance,
    beliefs: Option<&Beliefs>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let ctx = context(mech, instance, beliefs)?;
    let checks = vec![
        ctx.kernel(opts),
        ctx.budget(mech, opts),
        ctx.ir(opts),
        ctx.ic(opts),
        ctx.obedience(opts),
        ctx.revenue_cap(opts),
    ];
    Ok(VerificationReport { mechanism: mech.kind().as_str(), passed: checks.iter().all(|c| c.passed), checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::MechanismKind;

    fn handcrafted(t1: f64) -> (Instance, Mechanism) {
        let inst = Instance::treasure_box();
        let mut pay = vec![0.0; inst.n_types()];
        pay[inst.type_index(inst.buyer_type("0", 50.0).unwrap())] = 50.0;
        pay[inst.type_index(inst.buyer_type("1", 100.0).unwrap())] = t1;
        let m = Mechanism::full_revelation(MechanismKind::DepositReturn, &inst, pay).unwrap();
        (inst, m)
    }

    #[test]
    fn handcrafted_example_passes() {
        let (inst, m) = handcrafted(39.0);
        let r = verify_all(&m, &inst, 0.0).unwrap();
        assert!(r.passed, "{}", r.summary());
        let ic = r.check("ic").unwrap();
        // Type 1 truthful 1, misreport -10.
        assert!((ic.worst_slack.unwrap() - 11.0).abs() < 1e-9);
    }

    #[test]
    fn overpriced_type_fails_ir_only() {
        let (inst, m) = handcrafted(41.0);
        let r = verify_all(&m, &inst, 0.0).unwrap();
        let ir = r.check("ir").unwrap();
        assert!(!ir.passed);
        assert!((ir.worst_slack.unwrap() + 1.0).abs() < 1e-9);
        assert!(r.check("ic").unwrap().passed);
    }

    #[test]
    fn swapped_recommendations_fail_obedience_by_z() {
        let inst = Instance::treasure_box();
        let Mechanism::DepositReturn(mut m) =
            Mechanism::full_revelation(MechanismKind::DepositReturn, &inst, vec![0.0; inst.n_types()]).unwrap()
        else {
            unreachable!()
        };
        for k in &mut m.kernel {
            // [ω][a] with |Ω| = |A| = 2: swap the two actions per row.
            k.swap(0, 1);
            k.swap(2, 3);
        }
        let m = Mechanism::DepositReturn(m);
        let r = check_obedience(&m, &inst, None, &VerifyOptions::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.mode, Some(ObedienceMode::PerRecommendation));
        assert!((r.worst_slack.unwrap() + 120.0).abs() < 1e-9);
    }

    #[test]
    fn price_above_surplus_fails_ir_by_one() {
        let inst = Instance::treasure_box_with(60.0, 40.0, 200.0, 200.0, 0.0);
        let pay: Vec<f64> = inst.types().map(|ty| inst.surplus(ty).unwrap_or(0.0) + 1.0).collect();
        let m = Mechanism::full_revelation(MechanismKind::DepositReturn, &inst, pay).unwrap();
        let r = check_ir(&m, &inst, None, &VerifyOptions::default()).unwrap();
        assert!((r.worst_slack.unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn budget_boundary() {
        let inst = Instance::treasure_box();
        let at = |t: f64| {
            let mut pay = vec![0.0; inst.n_types()];
            pay[inst.type_index(inst.buyer_type("0", 50.0).unwrap())] = t;
            Mechanism::full_revelation(MechanismKind::DepositReturn, &inst, pay).unwrap()
        };
        assert!(check_budget(&at(50.0), &inst).unwrap().passed);
        assert!(!check_budget(&at(50.01), &inst).unwrap().passed);
        let probr = Mechanism::zero(MechanismKind::ProbReturn, &inst);
        assert!(check_budget(&probr, &inst).unwrap().passed);
    }

    #[test]
    fn corrupted_kernel_fails() {
        let (inst, m) = handcrafted(39.0);
        let Mechanism::DepositReturn(mut d) = m else { unreachable!() };
        d.kernel[0][0] = 0.7;
        let r = verify_all(&Mechanism::DepositReturn(d), &inst, 0.0).unwrap();
        assert!(!r.check("kernel").unwrap().passed);
        assert!(!r.passed);
    }

    #[test]
    fn zero_mechanism_passes_cap() {
        let inst = Instance::treasure_box();
        let z = Mechanism::zero(MechanismKind::DepositReturn, &inst);
        assert!(verify_all(&z, &inst, 0.0).unwrap().passed);
    }

    #[test]
    fn epsilon_is_monotone() {
        let (inst, m) = handcrafted(40.5);
        let strict = verify_all(&m, &inst, 0.0).unwrap();
        assert!(!strict.passed);
        let loose = verify_all(&m, &inst, 0.5).unwrap();
        assert!(loose.passed, "{}", loose.summary());
        assert!(verify_all(&m, &inst, 2.0).unwrap().passed);
    }
}
