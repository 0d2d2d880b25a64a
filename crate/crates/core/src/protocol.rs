//! Generic interactive selling protocols: finite trees of seller, buyer and
//! transfer nodes, evaluated by backward induction per buyer type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mechanisms::{Mechanism, MenuView};
use crate::model::{Beliefs, BuyerType, Instance};
use crate::{PROB_TOL, SOLVER_TOL};

/// Values within this of each other are ties, resolved in favour of
/// truthful reporting, then lower child index, then staying in.
pub const TIE_TOL: f64 = SOLVER_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Which report a node stands for. `budget: None` matches every budget (the
/// public-budget case).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReportTag {
    pub theta: usize,
    pub budget: Option<usize>,
}

impl ReportTag {
    pub fn matches(&self, ty: BuyerType) -> bool {
        self.theta == ty.theta && self.budget.is_none_or(|b| b == ty.budget)
    }
}

impl From<BuyerType> for ReportTag {
    fn from(ty: BuyerType) -> Self {
        Self { theta: ty.theta, budget: Some(ty.budget) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    /// Draws a child with probability `transitions[ω][k]`.
    Seller {
        children: Vec<NodeId>,
        transitions: Vec<Vec<f64>>,
    },
    Buyer {
        children: Vec<NodeId>,
    },
    /// Positive amounts are paid by the buyer.
    Transfer {
        amount: f64,
        child: NodeId,
    },
    Leaf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub report: Option<ReportTag>,
    pub label: Option<String>,
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match &self.kind {
            NodeKind::Seller { children, .. } | NodeKind::Buyer { children } => children,
            NodeKind::Transfer { child, .. } => std::slice::from_ref(child),
            NodeKind::Leaf => &[],
        }
    }
}

/// Arena-backed protocol tree. Nodes are added bottom-up, so children always
/// precede their parents and the structure is acyclic by construction.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ProtocolTree {
    nodes: Vec<Node>,
    root: Option<NodeId>,
}

impl ProtocolTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The root; defaults to the last node added.
    pub fn root(&self) -> Result<NodeId> {
        self.root
            .or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
            .ok_or_else(|| Error::ProtocolInvalid("empty tree".into()))
    }

    pub fn set_root(&mut self, id: NodeId) {
        self.root = Some(id);
    }

    fn push(&mut self, kind: NodeKind) -> NodeId {
        self.nodes.push(Node { kind, report: None, label: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self) -> NodeId {
        self.push(NodeKind::Leaf)
    }

    pub fn transfer(&mut self, amount: f64, child: NodeId) -> NodeId {
        self.push(NodeKind::Transfer { amount, child })
    }

    pub fn buyer(&mut self, children: Vec<NodeId>) -> NodeId {
        self.push(NodeKind::Buyer { children })
    }

    /// `transitions` is indexed `[ω][k]` over `children`.
    pub fn seller(&mut self, children: Vec<NodeId>, transitions: Vec<Vec<f64>>) -> NodeId {
        self.push(NodeKind::Seller { children, transitions })
    }

    pub fn tag(&mut self, id: NodeId, report: ReportTag) -> NodeId {
        self.nodes[id.0].report = Some(report);
        id
    }

    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    /// Depth of the tree (a lone leaf has depth 0).
    pub fn depth(&self) -> Result<usize> {
        fn go(t: &ProtocolTree, id: NodeId) -> usize {
            t.node(id).children().iter().map(|&c| 1 + go(t, c)).max().unwrap_or(0)
        }
        Ok(go(self, self.root()?))
    }

    /// Structural checks against an instance: single parent per node, every
    /// node reachable from the root, children before parents, transition
    /// rows that are distributions, finite transfers, tags in range.
    pub fn validate(&self, instance: &Instance) -> Result<()> {
        let root = self.root()?;
        let mut parent = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &c in node.children() {
                if c.0 >= i {
                    return Err(Error::ProtocolInvalid(format!("node {i} refers to later node {}", c.0)));
                }
                if parent[c.0].replace(i).is_some() {
                    return Err(Error::ProtocolInvalid(format!("node {} has two parents", c.0)));
                }
            }
            match &node.kind {
                NodeKind::Seller { children, transitions } => {
                    if children.is_empty() {
                        return Err(Error::ProtocolInvalid(format!("seller node {i} has no children")));
                    }
                    if transitions.len() != instance.n_omega() {
                        return Err(Error::ProtocolInvalid(format!(
                            "seller node {i} has {} transition rows, expected {}",
                            transitions.len(),
                            instance.n_omega()
                        )));
                    }
                    for (w, row) in transitions.iter().enumerate() {
                        if row.len() != children.len() {
                            return Err(Error::ProtocolInvalid(format!("seller node {i} row {w} has wrong length")));
                        }
                        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                            return Err(Error::ProtocolInvalid(format!("seller node {i} row {w} has invalid entry")));
                        }
                        let total: f64 = row.iter().sum();
                        if (total - 1.0).abs() > PROB_TOL {
                            return Err(Error::ProtocolInvalid(format!("seller node {i} row {w} sums to {total}")));
                        }
                    }
                }
                NodeKind::Buyer { children } if children.is_empty() => {
                    return Err(Error::ProtocolInvalid(format!("buyer node {i} has no children")));
                }
                NodeKind::Transfer { amount, .. } if !amount.is_finite() => {
                    return Err(Error::ProtocolInvalid(format!("transfer node {i} amount is not finite")));
                }
                _ => {}
            }
            if let Some(tag) = node.report {
                if tag.theta >= instance.n_theta() || tag.budget.is_some_and(|b| b >= instance.n_budgets()) {
                    return Err(Error::ProtocolInvalid(format!("node {i} report tag out of range")));
                }
            }
        }
        let orphans = (0..self.nodes.len()).filter(|&i| i != root.0 && parent[i].is_none()).count();
        if orphans > 0 || parent[root.0].is_some() {
            return Err(Error::ProtocolInvalid(format!("{orphans} nodes unreachable from the root")));
        }
        Ok(())
    }

    /// The two-option treasure-box protocol: pay 50 for the answer, or
    /// deposit 100, get 61 back, and then the answer.
    pub fn treasure_box_two_option(instance: &Instance) -> Result<Self> {
        let mut t = Self::new();
        let reveal = |t: &mut Self| {
            let leaves: Vec<NodeId> = (0..instance.n_omega()).map(|_| t.leaf()).collect();
            let rows = (0..instance.n_omega())
                .map(|w| (0..instance.n_omega()).map(|k| if k == w { 1.0 } else { 0.0 }).collect())
                .collect();
            t.seller(leaves, rows)
        };
        let s1 = reveal(&mut t);
        let pay50 = t.transfer(50.0, s1);
        t.label(pay50, "pay 50");
        let s2 = reveal(&mut t);
        let back = t.transfer(-61.0, s2);
        let dep = t.transfer(100.0, back);
        t.label(dep, "deposit 100, refund 61");
        let root = t.buyer(vec![pay50, dep]);
        t.set_root(root);
        t.validate(instance)?;
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Buyer node: take child `k`.
    Child(usize),
    Continue,
    /// Leave here; the buyer takes the best action under the current belief.
    Quit,
    /// Transfer node whose payment would exceed the budget; same as quitting.
    BudgetCut,
}

#[derive(Clone, Debug)]
pub struct TypeEval {
    pub buyer_type: BuyerType,
    /// Expected utility under the optimal strategy.
    pub value: f64,
    /// Expected net payment to the seller.
    pub payment: f64,
    /// `reach[node][ω]`: P(node is visited with the buyer still in | ω).
    pub reach: Vec<Vec<f64>>,
    /// Decision at every node (leaves: `Continue`).
    pub strategy: Vec<Decision>,
    /// Where play stops (a leaf or a quit point), with probability.
    pub terminal: Vec<(NodeId, f64)>,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    /// One entry per positive-mass type.
    pub types: Vec<TypeEval>,
    pub revenue: f64,
}

impl EvalResult {
    pub fn for_type(&self, ty: BuyerType) -> Option<&TypeEval> {
        self.types.iter().find(|t| t.buyer_type == ty)
    }

    pub fn value(&self, ty: BuyerType) -> Option<f64> {
        self.for_type(ty).map(|t| t.value)
    }
}

/// Unnormalized value and payment of a subtree given path weights.
#[derive(Clone, Copy)]
struct Sub {
    value: f64,
    payment: f64,
}

struct Solver<'a> {
    tree: &'a ProtocolTree,
    instance: &'a Instance,
    ty: BuyerType,
    budget: f64,
    strategy: Vec<Decision>,
}

impl Solver<'_> {
    fn quit(&self, w: &[f64], c: f64) -> Sub {
        let mass: f64 = w.iter().sum();
        Sub { value: self.instance.best_expected_utility(w, self.ty.theta) - c * mass, payment: c * mass }
    }

    fn solve(&mut self, id: NodeId, w: &[f64], c: f64) -> Result<Sub> {
        let node = self.tree.node(id);
        let quit = self.quit(w, c);
        let (stay, decision) = match &node.kind {
            NodeKind::Leaf => {
                self.strategy[id.0] = Decision::Continue;
                return Ok(quit);
            }
            NodeKind::Transfer { amount, child } => {
                let next = c + amount;
                if next > self.budget + TIE_TOL {
                    // Resolve the subtree at zero weight so every node has a
                    // decision without reaching its transfers.
                    self.solve(*child, &vec![0.0; w.len()], next)?;
                    self.strategy[id.0] = Decision::BudgetCut;
                    return Ok(quit);
                }
                let mass: f64 = w.iter().sum();
                if mass > 0.0 && -next > self.instance.seller_budget() + TIE_TOL {
                    return Err(Error::ProtocolInvalid(format!(
                        "node {} pays the buyer {} in total, more than the seller budget {}",
                        id.0,
                        -next,
                        self.instance.seller_budget()
                    )));
                }
                (self.solve(*child, w, next)?, Decision::Continue)
            }
            NodeKind::Seller { children, transitions } => {
                let mut total = Sub { value: 0.0, payment: 0.0 };
                for (k, &child) in children.iter().enumerate() {
                    let wk: Vec<f64> = w.iter().enumerate().map(|(o, x)| x * transitions[o][k]).collect();
                    let sub = self.solve(child, &wk, c)?;
                    total.value += sub.value;
                    total.payment += sub.payment;
                }
                (total, Decision::Continue)
            }
            NodeKind::Buyer { children } => {
                let subs: Vec<Sub> = children.iter().map(|&ch| self.solve(ch, w, c)).collect::<Result<_>>()?;
                let best = subs.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
                let near = |k: usize| subs[k].value >= best - TIE_TOL;
                let pick = (0..children.len())
                    .find(|&k| near(k) && self.tree.node(children[k]).report.is_some_and(|r| r.matches(self.ty)))
                    .or_else(|| (0..children.len()).find(|&k| near(k)))
                    .expect("non-empty buyer node");
                (subs[pick], Decision::Child(pick))
            }
        };
        if quit.value > stay.value + TIE_TOL {
            self.strategy[id.0] = Decision::Quit;
            Ok(quit)
        } else {
            self.strategy[id.0] = decision;
            Ok(stay)
        }
    }
}

/// Backward induction for every positive-mass type.
pub fn evaluate(tree: &ProtocolTree, instance: &Instance) -> Result<EvalResult> {
    evaluate_with(tree, instance, &Beliefs::from_instance(instance))
}

/// Backward induction under arbitrary beliefs over the instance's types.
pub fn evaluate_with(tree: &ProtocolTree, instance: &Instance, beliefs: &Beliefs) -> Result<EvalResult> {
    tree.validate(instance)?;
    beliefs.check_shape(instance)?;
    let root = tree.root()?;
    let mut types = Vec::new();
    let mut revenue = 0.0;
    for i in beliefs.active_types() {
        let ty = instance.type_at(i);
        let q = beliefs.conditional(i).expect("active").probs();
        let mut solver = Solver {
            tree,
            instance,
            ty,
            budget: instance.budget(ty.budget),
            strategy: vec![Decision::Continue; tree.len()],
        };
        let sub = solver.solve(root, q, 0.0)?;
        let strategy = solver.strategy;
        let (reach, terminal) = forward(tree, instance, root, &strategy, q);
        revenue += (0..instance.n_omega()).map(|w| beliefs.joint(i, w)).sum::<f64>() * sub.payment;
        types.push(TypeEval { buyer_type: ty, value: sub.value, payment: sub.payment, reach, strategy, terminal });
    }
    Ok(EvalResult { types, revenue })
}

fn forward(
    tree: &ProtocolTree,
    instance: &Instance,
    root: NodeId,
    strategy: &[Decision],
    belief: &[f64],
) -> (Vec<Vec<f64>>, Vec<(NodeId, f64)>) {
    let no = instance.n_omega();
    let mut reach = vec![vec![0.0; no]; tree.len()];
    reach[root.0] = vec![1.0; no];
    let mut stop = vec![0.0; tree.len()];
    // Parents come after children in the arena, so walk indices downward.
    for i in (0..=root.0).rev() {
        let r = reach[i].clone();
        if r.iter().all(|&x| x == 0.0) {
            continue;
        }
        let node = &tree.nodes[i];
        match (strategy[i], &node.kind) {
            (Decision::Quit | Decision::BudgetCut, _) | (_, NodeKind::Leaf) => {
                stop[i] += r.iter().zip(belief).map(|(a, b)| a * b).sum::<f64>();
            }
            (Decision::Child(k), NodeKind::Buyer { children }) => reach[children[k].0] = r,
            (_, NodeKind::Transfer { child, .. }) => reach[child.0] = r,
            (_, NodeKind::Seller { children, transitions }) => {
                for (k, ch) in children.iter().enumerate() {
                    reach[ch.0] = (0..no).map(|w| r[w] * transitions[w][k]).collect();
                }
            }
            (d, NodeKind::Buyer { .. }) => unreachable!("buyer node decision {d:?}"),
        }
    }
    let terminal = stop.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (NodeId(i), p)).collect();
    (reach, terminal)
}

/// The three-layer tree of a consulting mechanism: a buyer root with one
/// tagged child per positive-mass report, the transfer node(s), then a
/// seller node with one leaf per recommendation. The refund of a
/// probabilistic-return `[a,-]` recommendation sits below its seller branch.
///
/// For direct payment the tree is meant for the budget-collapsed instance
/// and reports are tagged by θ alone.
pub fn mechanism_to_protocol(mechanism: &Mechanism, instance: &Instance) -> Result<ProtocolTree> {
    let view = MenuView::new(mechanism, instance)?;
    let vi = &view.instance;
    let beliefs = Beliefs::from_instance(vi);
    let mut tree = ProtocolTree::new();
    let mut options = Vec::new();
    for r in beliefs.active_types() {
        let ty = vi.type_at(r);
        let offer = &view.offers[r];
        let mut leaves = Vec::with_capacity(offer.n_signals());
        for sig in &offer.signals {
            let leaf = tree.leaf();
            let name = match sig.indicator {
                Some(ind) => format!("[{},{}]", vi.action_labels()[sig.action], ind.symbol()),
                None => format!("[{}]", vi.action_labels()[sig.action]),
            };
            tree.label(leaf, name);
            let node = match (mechanism, sig.indicator) {
                (Mechanism::ProbReturn(p), Some(crate::mechanisms::Indicator::Refund)) => {
                    tree.transfer(-(vi.budget(ty.budget) + p.seller_budget), leaf)
                }
                _ => leaf,
            };
            leaves.push(node);
        }
        let rows = (0..vi.n_omega()).map(|w| (0..offer.n_signals()).map(|s| offer.prob(w, s)).collect()).collect();
        let seller = tree.seller(leaves, rows);
        let top = match mechanism {
            Mechanism::DirectPayment(m) => tree.transfer(m.payment[ty.theta], seller),
            Mechanism::SingleRound(m) => tree.transfer(m.payment[r], seller),
            Mechanism::DepositReturn(m) => {
                let b = vi.budget(ty.budget);
                let back = tree.transfer(-(b - m.payment[r]), seller);
                tree.transfer(b, back)
            }
            Mechanism::ProbReturn(_) => tree.transfer(vi.budget(ty.budget), seller),
        };
        let tag = match mechanism {
            Mechanism::DirectPayment(_) => ReportTag { theta: ty.theta, budget: None },
            _ => ty.into(),
        };
        tree.tag(top, tag);
        tree.label(top, format!("report {}", vi.type_key(ty)));
        options.push(top);
    }
    let root = tree.buyer(options);
    tree.set_root(root);
    Ok(tree)
}

/// Revelation-principle collapse: a buyer root with one tagged subtree per
/// positive-mass type, each the original tree with buyer nodes resolved by
/// that type's optimal strategy and quit points replaced by leaves.
pub fn to_revelation(tree: &ProtocolTree, instance: &Instance) -> Result<ProtocolTree> {
    let eval = evaluate(tree, instance)?;
    let root = tree.root()?;
    let mut out = ProtocolTree::new();
    let mut options = Vec::new();
    for te in &eval.types {
        let top = copy_resolved(tree, root, &te.strategy, &mut out);
        out.tag(top, te.buyer_type.into());
        options.push(top);
    }
    let new_root = out.buyer(options);
    out.set_root(new_root);
    Ok(out)
}

fn copy_resolved(tree: &ProtocolTree, id: NodeId, strategy: &[Decision], out: &mut ProtocolTree) -> NodeId {
    let node = tree.node(id);
    let copied = match (strategy[id.0], &node.kind) {
        (Decision::Quit | Decision::BudgetCut, _) | (_, NodeKind::Leaf) => out.leaf(),
        (Decision::Child(k), NodeKind::Buyer { children }) => return copy_resolved(tree, children[k], strategy, out),
        (_, NodeKind::Transfer { amount, child }) => {
            let c = copy_resolved(tree, *child, strategy, out);
            out.transfer(*amount, c)
        }
        (_, NodeKind::Seller { children, transitions }) => {
            let cs = children.iter().map(|&c| copy_resolved(tree, c, strategy, out)).collect();
            out.seller(cs, transitions.clone())
        }
        (d, NodeKind::Buyer { .. }) => unreachable!("buyer node decision {d:?}"),
    };
    if let Some(l) = &node.label {
        out.label(copied, l.clone());
    }
    copied
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationResult {
    pub trials: u64,
    pub mean_revenue: f64,
    pub std_error: f64,
}

/// Monte-Carlo play of the protocol with optimal buyer strategies: draw
/// (ω, θ, b) from the prior, sample seller transitions, and average the
/// realized net payment.
pub fn simulate(tree: &ProtocolTree, instance: &Instance, trials: u64, seed: u64) -> Result<SimulationResult> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let eval = evaluate(tree, instance)?;
    let root = tree.root()?;
    let cells: Vec<(usize, usize, f64)> = eval
        .types
        .iter()
        .enumerate()
        .flat_map(|(k, te)| {
            (0..instance.n_omega()).map(move |w| (k, w, instance.prior(w, te.buyer_type.theta, te.buyer_type.budget)))
        })
        .filter(|c| c.2 > 0.0)
        .collect();
    let total: f64 = cells.iter().map(|c| c.2).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let mut u = rng.random::<f64>() * total;
        let &(k, w, _) = cells
            .iter()
            .find(|c| {
                u -= c.2;
                u < 0.0
            })
            .unwrap_or(cells.last().expect("prior has mass"));
        let strategy = &eval.types[k].strategy;
        let mut paid = 0.0;
        let mut id = root;
        loop {
            let node = tree.node(id);
            match (strategy[id.0], &node.kind) {
                (Decision::Quit | Decision::BudgetCut, _) | (_, NodeKind::Leaf) => break,
                (Decision::Child(c), NodeKind::Buyer { children }) => id = children[c],
                (_, NodeKind::Transfer { amount, child }) => {
                    paid += amount;
                    id = *child;
                }
                (_, NodeKind::Seller { children, transitions }) => {
                    let mut x = rng.random::<f64>();
                    let row = &transitions[w];
                    let mut next = *children.last().expect("seller children");
                    for (c, p) in row.iter().enumerate() {
                        x -= p;
                        if x < 0.0 {
                            next = children[c];
                            break;
                        }
                    }
                    id = next;
                }
                (d, NodeKind::Buyer { .. }) => unreachable!("buyer node decision {d:?}"),
            }
        }
        sum += paid;
        sum_sq += paid * paid;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(SimulationResult { trials, mean_revenue: mean, std_error: (var / n).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{expected_revenue, solve_cm_depr, solve_cm_probr, MechanismKind};

    #[test]
    fn two_option_tree_earns_44_5() {
        let inst = Instance::treasure_box();
        let tree = ProtocolTree::treasure_box_two_option(&inst).unwrap();
        let eval = evaluate(&tree, &inst).unwrap();
        assert!((eval.revenue - 44.5).abs() < 1e-9);
        let t0 = inst.buyer_type("0", 50.0).unwrap();
        let t1 = inst.buyer_type("1", 100.0).unwrap();
        assert!((eval.value(t0).unwrap() - 70.0).abs() < 1e-9);
        assert!((eval.value(t1).unwrap() - 41.0).abs() < 1e-9);
        // Type 0 cannot afford the deposit.
        let s0 = &eval.for_type(t0).unwrap().strategy;
        assert_eq!(s0[tree.root().unwrap().0], Decision::Child(0));
    }

    #[test]
    fn lone_leaf_is_outside_option() {
        let inst = Instance::treasure_box();
        let mut tree = ProtocolTree::new();
        tree.leaf();
        let eval = evaluate(&tree, &inst).unwrap();
        assert_eq!(eval.revenue, 0.0);
        for te in &eval.types {
            assert!((te.value - inst.outside_option(te.buyer_type).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn seller_budget_violation_is_rejected() {
        let inst = Instance::treasure_box();
        let mut tree = ProtocolTree::new();
        let l = tree.leaf();
        let gift = tree.transfer(-5.0, l);
        tree.buyer(vec![gift]);
        assert!(matches!(evaluate(&tree, &inst), Err(Error::ProtocolInvalid(_))));
        assert!(evaluate(&tree, &inst.with_seller_budget(5.0)).is_ok());
    }

    #[test]
    fn malformed_trees_are_rejected() {
        let inst = Instance::treasure_box();
        let mut tree = ProtocolTree::new();
        let l = tree.leaf();
        tree.seller(vec![l], vec![vec![0.5], vec![1.0]]);
        assert!(tree.validate(&inst).is_err());

        let mut shared = ProtocolTree::new();
        let l = shared.leaf();
        shared.buyer(vec![l, l]);
        assert!(shared.validate(&inst).is_err());
    }

    #[test]
    fn embedded_mechanisms_match_expected_revenue() {
        let inst = Instance::treasure_box();
        for sol in [solve_cm_depr(&inst).unwrap(), solve_cm_probr(&inst).unwrap()] {
            let tree = mechanism_to_protocol(&sol.mechanism, &inst).unwrap();
            assert!(tree.depth().unwrap() <= 4);
            let eval = evaluate(&tree, &inst).unwrap();
            let exact = expected_revenue(&sol.mechanism, &inst).unwrap();
            assert!((eval.revenue - exact).abs() < 1e-9, "{} vs {exact}", eval.revenue);
            assert!((eval.revenue - 45.0).abs() < 1e-5);
        }
        let dirp = Mechanism::full_revelation(MechanismKind::DirectPayment, &inst, vec![40.0, 40.0]).unwrap();
        let eval = evaluate(&mechanism_to_protocol(&dirp, &inst).unwrap(), &inst).unwrap();
        assert!((eval.revenue - 40.0).abs() < 1e-9);
        let zero = Mechanism::zero(MechanismKind::DepositReturn, &inst);
        assert_eq!(evaluate(&mechanism_to_protocol(&zero, &inst).unwrap(), &inst).unwrap().revenue, 0.0);
    }

    #[test]
    fn revelation_keeps_revenue_and_values() {
        let inst = Instance::treasure_box();
        let tree = ProtocolTree::treasure_box_two_option(&inst).unwrap();
        let rev = to_revelation(&tree, &inst).unwrap();
        let (a, b) = (evaluate(&tree, &inst).unwrap(), evaluate(&rev, &inst).unwrap());
        assert!((a.revenue - b.revenue).abs() < 1e-9);
        for te in &a.types {
            assert!((te.value - b.value(te.buyer_type).unwrap()).abs() < 1e-9);
        }
        // Idempotent up to relabeling.
        let again = to_revelation(&rev, &inst).unwrap();
        assert_eq!(again.len(), rev.len());
    }

    #[test]
    fn quitting_type_gets_a_bare_leaf() {
        let inst = Instance::treasure_box();
        let mut tree = ProtocolTree::new();
        let l = tree.leaf();
        let t = tree.transfer(65.0, l);
        tree.buyer(vec![t]);
        let rev = to_revelation(&tree, &inst).unwrap();
        let root = rev.node(rev.root().unwrap());
        for &c in root.children() {
            assert_eq!(rev.node(c).kind, NodeKind::Leaf);
        }
    }

    #[test]
    fn simulation_is_seeded_and_close() {
        let inst = Instance::treasure_box();
        let tree = ProtocolTree::treasure_box_two_option(&inst).unwrap();
        let a = simulate(&tree, &inst, 20_000, 7).unwrap();
        let b = simulate(&tree, &inst, 20_000, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.mean_revenue - 44.5).abs() < 3.0 * a.std_error + 1e-9);
    }
}
