//! Black-box priors: draw samples, build empirical beliefs, solve the
//! ε-relaxed probabilistic-return program and sell to the live buyer.

use std::io::BufRead;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mechanisms::{self, expected_revenue, Indicator, Mechanism, MechanismSolution};
use crate::model::{Beliefs, BuyerType, Instance, Posterior};
use crate::verify::{self, VerifyOptions};

/// One draw (θ, ω, b), as indices into an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub theta: usize,
    pub omega: usize,
    pub budget: usize,
}

impl Triple {
    pub fn buyer_type(&self) -> BuyerType {
        BuyerType { theta: self.theta, budget: self.budget }
    }
}

/// Source of i.i.d. draws from a hidden prior.
pub trait SampleOracle {
    fn draw(&mut self, rng: &mut dyn RngCore) -> Result<Triple>;
}

/// Draws from a known instance prior.
#[derive(Clone, Debug)]
pub struct InstanceSampler {
    cells: Vec<(Triple, f64)>,
    total: f64,
}

impl InstanceSampler {
    pub fn new(instance: &Instance) -> Self {
        let mut cells = Vec::new();
        for w in 0..instance.n_omega() {
            for ty in instance.types() {
                let p = instance.prior(w, ty.theta, ty.budget);
                if p > 0.0 {
                    cells.push((Triple { theta: ty.theta, omega: w, budget: ty.budget }, p));
                }
            }
        }
        let total = cells.iter().map(|c| c.1).sum();
        Self { cells, total }
    }
}

impl SampleOracle for InstanceSampler {
    fn draw(&mut self, rng: &mut dyn RngCore) -> Result<Triple> {
        let mut u = rng.random::<f64>() * self.total;
        for (t, p) in &self.cells {
            u -= p;
            if u < 0.0 {
                return Ok(*t);
            }
        }
        self.cells.last().map(|c| c.0).ok_or_else(|| Error::Sampling("prior has no mass".into()))
    }
}

#[derive(Deserialize)]
struct StreamRecord {
    theta: String,
    omega: String,
    b: f64,
}

/// Replays recorded triples in order; the random stream is ignored.
#[derive(Clone, Debug)]
pub struct StreamSampler {
    triples: Vec<Triple>,
    next: usize,
}

impl StreamSampler {
    pub fn new(triples: Vec<Triple>) -> Self {
        Self { triples, next: 0 }
    }

    /// Parses JSON lines `{"theta": .., "omega": .., "b": ..}` against the
    /// labels and budget levels of `instance`. Blank lines are skipped.
    pub fn from_json_lines(reader: impl BufRead, instance: &Instance) -> Result<Self> {
        let mut triples = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StreamRecord =
                serde_json::from_str(&line).map_err(|e| Error::Sampling(format!("line {}: {e}", n + 1)))?;
            let ty = instance.buyer_type(&rec.theta, rec.b)?;
            triples.push(Triple { theta: ty.theta, omega: instance.omega_index(&rec.omega)?, budget: ty.budget });
        }
        Ok(Self::new(triples))
    }

    pub fn remaining(&self) -> usize {
        self.triples.len() - self.next
    }
}

impl SampleOracle for StreamSampler {
    fn draw(&mut self, _rng: &mut dyn RngCore) -> Result<Triple> {
        let t = self
            .triples
            .get(self.next)
            .copied()
            .ok_or_else(|| Error::Sampling(format!("stream exhausted after {} triples", self.triples.len())))?;
        self.next += 1;
        Ok(t)
    }
}

/// Empirical prior over a sample set whose first element is the live
/// interaction. The joint is the empirical distribution of S; the
/// conditional for every (θ,b) is empirical over {ω₁} together with the ω
/// of later samples of that type. Types that never occur in S carry no mass
/// and take no part in the program.
#[derive(Clone, Debug)]
pub struct EmpiricalPrior {
    samples: Vec<Triple>,
    beliefs: Beliefs,
}

impl EmpiricalPrior {
    pub fn from_samples(instance: &Instance, samples: Vec<Triple>) -> Result<Self> {
        let first = *samples.first().ok_or_else(|| Error::InvalidParameter("need at least one sample".into()))?;
        let (no, nt) = (instance.n_omega(), instance.n_types());
        if samples.iter().any(|s| s.omega >= no || s.theta >= instance.n_theta() || s.budget >= instance.n_budgets()) {
            return Err(Error::ShapeMismatch("sample outside the instance's signal or type sets".into()));
        }
        let n = samples.len() as f64;
        let mut joint = vec![0.0; nt * no];
        let mut counts = vec![0.0; nt * no];
        for (i, s) in samples.iter().enumerate() {
            let t = instance.type_index(s.buyer_type());
            joint[t * no + s.omega] += 1.0;
            if i > 0 {
                counts[t * no + s.omega] += 1.0;
            }
        }
        joint.iter_mut().for_each(|x| *x /= n);
        let conditional = (0..nt)
            .map(|t| {
                if joint[t * no..(t + 1) * no].iter().all(|&x| x == 0.0) {
                    return Ok(None);
                }
                let mut row = counts[t * no..(t + 1) * no].to_vec();
                row[first.omega] += 1.0;
                let total: f64 = row.iter().sum();
                Posterior::new(row.iter().map(|c| c / total).collect()).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let beliefs = Beliefs::from_parts(no, joint, conditional)?;
        Ok(Self { samples, beliefs })
    }

    pub fn samples(&self) -> &[Triple] {
        &self.samples
    }

    pub fn live(&self) -> Triple {
        self.samples[0]
    }

    pub fn beliefs(&self) -> &Beliefs {
        &self.beliefs
    }

    /// Empirical μ̂(θ,b).
    pub fn type_mass(&self, instance: &Instance, ty: BuyerType) -> f64 {
        self.beliefs.mass(instance.type_index(ty))
    }
}

/// Builds S from the live triple and `n − 1` oracle draws.
pub fn draw_samples(
    oracle: &mut dyn SampleOracle,
    instance: &Instance,
    n: usize,
    live: Triple,
    rng: &mut dyn RngCore,
) -> Result<EmpiricalPrior> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    samples.push(live);
    for _ in 1..n {
        samples.push(oracle.draw(rng)?);
    }
    EmpiricalPrior::from_samples(instance, samples)
}

/// The ε-relaxed probabilistic-return program under μ̂. The seller budget and
/// utilities come from `instance`; its prior is not used.
pub fn solve_epsilon_lp(empirical: &EmpiricalPrior, instance: &Instance, eps: f64) -> Result<MechanismSolution> {
    mechanisms::solve_prob_return_relaxed(instance, empirical.beliefs(), eps)
}

#[derive(Clone, Debug)]
pub struct SaleOutcome {
    pub action: usize,
    pub indicator: Indicator,
    /// b₁ for `+`, −M for `-`.
    pub transfer: f64,
    pub empirical: EmpiricalPrior,
    pub solution: MechanismSolution,
}

/// Sells to a live buyer of type (θ₁,b₁) when the state is ω₁: samples
/// n − 1 further triples, solves the ε-program under μ̂, and samples a
/// recommendation with its return indicator from p_{θ₁,b₁}(ω₁).
pub fn sell_with_samples(
    oracle: &mut dyn SampleOracle,
    instance: &Instance,
    n: usize,
    eps: f64,
    live: Triple,
    rng: &mut dyn RngCore,
) -> Result<SaleOutcome> {
    let empirical = draw_samples(oracle, instance, n, live, rng)?;
    let solution = solve_epsilon_lp(&empirical, instance, eps)?;
    let Mechanism::ProbReturn(ref m) = solution.mechanism else {
        return Err(Error::Internal("ε-program returned a non-probabilistic mechanism".into()));
    };
    let (na, t) = (instance.n_actions(), instance.type_index(live.buyer_type()));
    let row = live.omega * na..(live.omega + 1) * na;
    let mut u = rng.random::<f64>();
    let mut pick = None;
    for (ind, probs) in [(Indicator::Pay, &m.pay[t][row.clone()]), (Indicator::Refund, &m.refund[t][row.clone()])] {
        for (a, p) in probs.iter().enumerate() {
            if pick.is_none() {
                u -= p;
                if u < 0.0 {
                    pick = Some((a, ind));
                }
            }
        }
    }
    // Rounding can leave u marginally positive; fall back to the last
    // positive entry.
    let (action, indicator) = pick.unwrap_or_else(|| {
        let last_refund = m.refund[t][row.clone()].iter().rposition(|&p| p > 0.0);
        match last_refund {
            Some(a) => (a, Indicator::Refund),
            None => (m.pay[t][row.clone()].iter().rposition(|&p| p > 0.0).unwrap_or(0), Indicator::Pay),
        }
    });
    let transfer = match indicator {
        Indicator::Pay => instance.budget(live.budget),
        Indicator::Refund => -m.seller_budget,
    };
    Ok(SaleOutcome { action, indicator, transfer, empirical, solution })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replication {
    pub seed: u64,
    pub live: Triple,
    /// Rev_S of the mechanism: the program objective under μ̂.
    pub empirical_revenue: f64,
    /// Expected revenue under the true prior, when it is known.
    pub true_revenue: Option<f64>,
    pub transfer: f64,
    /// ε-feasibility of the mechanism with respect to μ̂.
    pub eps_feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationSummary {
    pub runs: Vec<Replication>,
}

impl ReplicationSummary {
    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Mean expected revenue under the true prior if known, otherwise under μ̂.
    pub fn mean_revenue(&self) -> f64 {
        Self::mean(self.runs.iter().map(|r| r.true_revenue.unwrap_or(r.empirical_revenue)))
    }

    pub fn mean_empirical_revenue(&self) -> f64 {
        Self::mean(self.runs.iter().map(|r| r.empirical_revenue))
    }

    pub fn mean_transfer(&self) -> f64 {
        Self::mean(self.runs.iter().map(|r| r.transfer))
    }

    pub fn all_eps_feasible(&self) -> bool {
        self.runs.iter().all(|r| r.eps_feasible)
    }
}

/// Runs `sell_with_samples` `replications` times. Replication `r` uses the seed
/// `seed + r` for both the live draw and the sample draws. `truth`, when
/// given, is used to report the expected revenue under the real prior.
pub fn run_replications(
    oracle: &mut dyn SampleOracle,
    instance: &Instance,
    truth: Option<&Instance>,
    n: usize,
    eps: f64,
    replications: usize,
    seed: u64,
) -> Result<ReplicationSummary> {
    let mut runs = Vec::with_capacity(replications);
    for r in 0..replications {
        let rseed = seed.wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(rseed);
        let live = oracle.draw(&mut rng)?;
        let out = sell_with_samples(oracle, instance, n, eps, live, &mut rng)?;
        let report = verify::verify_all_with(
            &out.solution.mechanism,
            instance,
            Some(out.empirical.beliefs()),
            &VerifyOptions::with_epsilon(eps),
        )?;
        let true_revenue = truth.map(|t| expected_revenue(&out.solution.mechanism, t)).transpose()?;
        runs.push(Replication {
            seed: rseed,
            live,
            empirical_revenue: out.solution.revenue,
            true_revenue,
            transfer: out.transfer,
            eps_feasible: report.passed,
        });
    }
    Ok(ReplicationSummary { runs })
}

/// Explicit sample size from the concentration argument:
/// max{64|A|²·ln(8|Θ|²|B|²|A|²/δ)/(ε²·μ_min), 2·ln(4|Θ||B|/δ)/μ_min²}, rounded up.
pub fn sample_complexity_bound(
    n_actions: usize,
    n_theta: usize,
    n_budgets: usize,
    eps: f64,
    delta: f64,
    mu_min: f64,
) -> Result<u64> {
    if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("ε = {eps} and δ = {delta} must lie in (0,1)")));
    }
    if !(mu_min > 0.0 && mu_min <= 1.0) {
        return Err(Error::InvalidParameter(format!("μ_min = {mu_min} must lie in (0,1]")));
    }
    if n_actions == 0 || n_theta == 0 || n_budgets == 0 {
        return Err(Error::InvalidParameter("empty action or type set".into()));
    }
    let (a, t, b) = (n_actions as f64, n_theta as f64, n_budgets as f64);
    let first = 64.0 * a * a * (8.0 * t * t * b * b * a * a / delta).ln() / (eps * eps * mu_min);
    let second = 2.0 * (4.0 * t * b / delta).ln() / (mu_min * mu_min);
    Ok(first.max(second).ceil() as u64)
}

/// Smallest positive type mass of the instance.
pub fn min_type_mass(instance: &Instance) -> f64 {
    let b = Beliefs::from_instance(instance);
    b.active_types().into_iter().map(|i| b.mass(i)).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tb() -> Instance {
        Instance::treasure_box()
    }

    #[test]
    fn single_sample_is_a_point_mass() {
        let inst = tb();
        let live = Triple { theta: 1, omega: 0, budget: 1 };
        let mut oracle = InstanceSampler::new(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emp = draw_samples(&mut oracle, &inst, 1, live, &mut rng).unwrap();
        let b = emp.beliefs();
        assert_eq!(b.active_types(), vec![inst.type_index(live.buyer_type())]);
        assert_eq!(b.joint(inst.type_index(live.buyer_type()), 0), 1.0);
        let sol = solve_epsilon_lp(&emp, &inst, 0.0).unwrap();
        assert!(sol.revenue >= -1e-9);
    }

    #[test]
    fn deterministic_oracle_gives_point_mass() {
        let inst = tb();
        let t = Triple { theta: 0, omega: 1, budget: 0 };
        let mut oracle = StreamSampler::new(vec![t; 50]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emp = draw_samples(&mut oracle, &inst, 50, t, &mut rng).unwrap();
        assert_eq!(emp.type_mass(&inst, t.buyer_type()), 1.0);
        assert_eq!(emp.beliefs().conditional(inst.type_index(t.buyer_type())).unwrap().probs(), &[0.0, 1.0]);
    }

    #[test]
    fn live_state_enters_every_conditional() {
        let inst = tb();
        let samples = vec![
            Triple { theta: 0, omega: 1, budget: 0 },
            Triple { theta: 1, omega: 0, budget: 1 },
            Triple { theta: 0, omega: 0, budget: 0 },
        ];
        let emp = EmpiricalPrior::from_samples(&inst, samples).unwrap();
        let c1 = emp.beliefs().conditional(inst.type_index(BuyerType { theta: 1, budget: 1 })).unwrap();
        assert_eq!(c1.probs(), &[0.5, 0.5]);
        let c0 = emp.beliefs().conditional(inst.type_index(BuyerType { theta: 0, budget: 0 })).unwrap();
        assert_eq!(c0.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn empirical_masses_concentrate() {
        let inst = tb();
        let mut oracle = InstanceSampler::new(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let live = oracle.draw(&mut rng).unwrap();
        let emp = draw_samples(&mut oracle, &inst, 10_000, live, &mut rng).unwrap();
        for ty in [BuyerType { theta: 0, budget: 0 }, BuyerType { theta: 1, budget: 1 }] {
            assert!((emp.type_mass(&inst, ty) - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn exact_prior_matches_probr() {
        let inst = tb();
        let exact = mechanisms::solve_prob_return_relaxed(&inst, &Beliefs::from_instance(&inst), 0.0).unwrap();
        let probr = mechanisms::solve_cm_probr(&inst).unwrap();
        assert!((exact.lp_objective - probr.lp_objective).abs() < 1e-6);
        let loose = mechanisms::solve_prob_return_relaxed(&inst, &Beliefs::from_instance(&inst), 200.0).unwrap();
        assert!(loose.lp_objective >= exact.lp_objective - 1e-9);
    }

    #[test]
    fn transfers_are_two_point() {
        let inst = tb().with_seller_budget(2.0);
        let mut oracle = InstanceSampler::new(&inst);
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let live = oracle.draw(&mut rng).unwrap();
            let out = sell_with_samples(&mut oracle, &inst, 200, 0.05, live, &mut rng).unwrap();
            assert!(out.transfer == inst.budget(live.budget) || out.transfer == -2.0);
        }
    }

    #[test]
    fn bound_scaling() {
        let base = sample_complexity_bound(2, 2, 2, 0.1, 0.1, 0.25).unwrap();
        let halved = sample_complexity_bound(2, 2, 2, 0.05, 0.1, 0.25).unwrap();
        assert!((halved as f64 / base as f64 - 4.0).abs() < 1e-5);
        // Large ε and rare types: the second term 2·ln(4|Θ||B|/δ)/μ_min² dominates.
        let second = sample_complexity_bound(1, 1, 1, 0.9, 0.5, 1e-3).unwrap();
        assert_eq!(second, (2.0 * 8.0f64.ln() / 1e-6).ceil() as u64);
        assert!(sample_complexity_bound(2, 2, 2, 0.0, 0.1, 0.25).is_err());
        assert!(sample_complexity_bound(2, 2, 2, 0.1, 0.1, 1.5).is_err());
    }

    #[test]
    fn stream_parsing() {
        let inst = tb();
        let text = "{\"theta\":\"1\",\"omega\":\"0\",\"b\":100}\n\n{\"theta\":\"0\",\"omega\":\"1\",\"b\":50}\n";
        let mut s = StreamSampler::from_json_lines(text.as_bytes(), &inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.draw(&mut rng).unwrap(), Triple { theta: 1, omega: 0, budget: 1 });
        assert_eq!(s.remaining(), 1);
        s.draw(&mut rng).unwrap();
        assert!(matches!(s.draw(&mut rng), Err(Error::Sampling(_))));
        assert!(
            StreamSampler::from_json_lines("{\"theta\":\"7\",\"omega\":\"0\",\"b\":100}".as_bytes(), &inst).is_err()
        );
    }
}
