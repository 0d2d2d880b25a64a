//! Seeded random instances and protocol trees for experiments and tests.

use rand::{Rng, RngCore};

use crate::model::Instance;
use crate::protocol::{NodeId, ProtocolTree};

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub max_omega: usize,
    pub max_theta: usize,
    pub max_actions: usize,
    pub max_budgets: usize,
    /// Utilities are integers in `0..=max_utility`.
    pub max_utility: u32,
    /// Budget levels are distinct integers in `1..=max_budget`.
    pub max_budget: u32,
    pub max_seller_budget: u32,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            max_omega: 4,
            max_theta: 4,
            max_actions: 4,
            max_budgets: 3,
            max_utility: 20,
            max_budget: 30,
            max_seller_budget: 10,
        }
    }
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn weights(rng: &mut dyn RngCore, n: usize, allow_zero: bool) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(if allow_zero { 0..=9 } else { 1..=9 }) as f64).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Random instance. With `correlated = false` the prior factors as
/// μ(ω)·μ(θ,b); otherwise every cell is drawn freely. Some types may have
/// zero mass.
pub fn random_instance(rng: &mut dyn RngCore, shape: &Shape, correlated: bool) -> Instance {
    let no = rng.random_range(1..=shape.max_omega.max(1));
    let nt = rng.random_range(1..=shape.max_theta.max(1));
    let na = rng.random_range(1..=shape.max_actions.max(1));
    let nb = rng.random_range(1..=shape.max_budgets.max(1)).min(shape.max_budget as usize);
    let mut budgets: Vec<u32> = Vec::with_capacity(nb);
    while budgets.len() < nb {
        let b = rng.random_range(1..=shape.max_budget);
        if !budgets.contains(&b) {
            budgets.push(b);
        }
    }
    budgets.sort_unstable();
    let prior = if correlated {
        weights(rng, no * nt * nb, true)
    } else {
        let omega = weights(rng, no, false);
        let types = weights(rng, nt * nb, true);
        let mut p = Vec::with_capacity(no * nt * nb);
        for w in omega {
            p.extend(types.iter().map(|t| w * t));
        }
        p
    };
    let utility = (0..no * nt * na).map(|_| rng.random_range(0..=shape.max_utility) as f64).collect();
    let seller_budget = rng.random_range(0..=shape.max_seller_budget) as f64;
    Instance::new(
        labels("w", no),
        labels("t", nt),
        labels("a", na),
        budgets.into_iter().map(f64::from).collect(),
        prior,
        utility,
        seller_budget,
    )
    .expect("generated instances are valid")
}

/// Random protocol tree of depth at most `max_depth` whose refunds never
/// exceed the seller budget on any path.
pub fn random_tree(rng: &mut dyn RngCore, instance: &Instance, max_depth: usize) -> ProtocolTree {
    let mut tree = ProtocolTree::new();
    let top = *instance.budget_levels().last().expect("budget levels") as i64;
    let root = grow(rng, instance, &mut tree, max_depth, 0, top);
    tree.set_root(root);
    tree
}

fn grow(rng: &mut dyn RngCore, inst: &Instance, tree: &mut ProtocolTree, depth: usize, paid: i64, top: i64) -> NodeId {
    if depth == 0 || rng.random_bool(0.2) {
        return tree.leaf();
    }
    match rng.random_range(0..3) {
        0 => {
            let k = rng.random_range(1..=3);
            let children = (0..k).map(|_| grow(rng, inst, tree, depth - 1, paid, top)).collect();
            let rows = (0..inst.n_omega()).map(|_| weights(rng, k, true)).collect();
            tree.seller(children, rows)
        }
        1 => {
            let k = rng.random_range(1..=3);
            let children = (0..k).map(|_| grow(rng, inst, tree, depth - 1, paid, top)).collect();
            tree.buyer(children)
        }
        _ => {
            // Cumulative net payment stays at least -M.
            let lo = -(inst.seller_budget() as i64) - paid;
            let amount = rng.random_range(lo..=top.max(lo));
            let child = grow(rng, inst, tree, depth - 1, paid + amount, top);
            tree.transfer(amount as f64, child)
        }
    }
}
