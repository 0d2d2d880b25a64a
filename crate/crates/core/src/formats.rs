//! JSON documents for instances, mechanisms and protocol trees.
//!
//! Signals, types and actions are referred to by label and budgets by
//! amount, so files stay readable and independent of index order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{
    DepositReturnMechanism, DirectPaymentMechanism, Mechanism, MechanismKind, MenuView, ProbReturnMechanism,
};
use crate::model::{fmt_money, Beliefs, Instance};
use crate::protocol::{NodeId, NodeKind, ProtocolTree, ReportTag};

/// A label written either as a string or as a bare number.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
enum LabelRepr {
    Text(String),
    Int(i64),
    Float(f64),
}

impl LabelRepr {
    fn into_string(self) -> String {
        match self {
            Self::Text(s) => s,
            Self::Int(i) => i.to_string(),
            Self::Float(f) => f.to_string(),
        }
    }
}

mod label {
    use super::LabelRepr;
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
        LabelRepr::deserialize(d).map(LabelRepr::into_string)
    }

    pub fn many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        Vec::<LabelRepr>::deserialize(d).map(|v| v.into_iter().map(LabelRepr::into_string).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PriorEntry {
    #[serde(deserialize_with = "label::deserialize")]
    omega: String,
    #[serde(deserialize_with = "label::deserialize")]
    theta: String,
    b: f64,
    p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UtilityEntry {
    #[serde(deserialize_with = "label::deserialize")]
    omega: String,
    #[serde(deserialize_with = "label::deserialize")]
    theta: String,
    #[serde(deserialize_with = "label::deserialize")]
    a: String,
    u: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    #[serde(deserialize_with = "label::many")]
    omega: Vec<String>,
    #[serde(deserialize_with = "label::many")]
    theta: Vec<String>,
    #[serde(deserialize_with = "label::many")]
    actions: Vec<String>,
    budgets: Vec<f64>,
    #[serde(default)]
    seller_budget: f64,
    prior: Vec<PriorEntry>,
    utility: Vec<UtilityEntry>,
}

fn duplicates(labels: &[String], kind: &str, issues: &mut Vec<String>) {
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if !seen.insert(l) {
            issues.push(format!("duplicate {kind} label `{l}`"));
        }
    }
}

/// Parses and validates an instance document.
pub fn instance_from_json(text: &str) -> Result<Instance> {
    let doc: InstanceDoc = serde_json::from_str(text)?;
    let mut issues = Vec::new();
    duplicates(&doc.omega, "omega", &mut issues);
    duplicates(&doc.theta, "theta", &mut issues);
    duplicates(&doc.actions, "action", &mut issues);
    if !issues.is_empty() {
        return Err(Error::InvalidInstance(issues));
    }
    let (no, nt, na, nb) = (doc.omega.len(), doc.theta.len(), doc.actions.len(), doc.budgets.len());
    let mut budgets = doc.budgets.clone();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    if budgets.len() != nb {
        return Err(Error::InvalidInstance(vec!["duplicate budget level".into()]));
    }
    // A shell instance with the final labels resolves names to indices.
    let shell = Instance::new_unchecked(
        doc.omega.clone(),
        doc.theta.clone(),
        doc.actions.clone(),
        budgets.clone(),
        vec![0.0; no * nt * nb],
        vec![0.0; no * nt * na],
        doc.seller_budget,
    )?;
    let mut prior = vec![None; no * nt * nb];
    for e in &doc.prior {
        let (w, t, b) = (shell.omega_index(&e.omega)?, shell.theta_index(&e.theta)?, shell.budget_index(e.b)?);
        if prior[(w * nt + t) * nb + b].replace(e.p).is_some() {
            issues.push(format!("prior entry ({}, {}, {}) listed twice", e.omega, e.theta, fmt_money(e.b)));
        }
    }
    let mut utility = vec![None; no * nt * na];
    for e in &doc.utility {
        let (w, t, a) = (shell.omega_index(&e.omega)?, shell.theta_index(&e.theta)?, shell.action_index(&e.a)?);
        if utility[(w * nt + t) * na + a].replace(e.u).is_some() {
            issues.push(format!("utility entry ({}, {}, {}) listed twice", e.omega, e.theta, e.a));
        }
    }
    for w in 0..no {
        for t in 0..nt {
            for a in 0..na {
                if utility[(w * nt + t) * na + a].is_none() {
                    issues.push(format!("utility ({}, {}, {}) missing", doc.omega[w], doc.theta[t], doc.actions[a]));
                }
            }
        }
    }
    if !issues.is_empty() {
        return Err(Error::InvalidInstance(issues));
    }
    Instance::new(
        doc.omega,
        doc.theta,
        doc.actions,
        budgets,
        prior.into_iter().map(|p| p.unwrap_or(0.0)).collect(),
        utility.into_iter().map(|u| u.expect("checked")).collect(),
        doc.seller_budget,
    )
}

/// Instance document; zero prior cells are omitted.
pub fn instance_to_json(instance: &Instance) -> String {
    let mut prior = Vec::new();
    let mut utility = Vec::new();
    for w in 0..instance.n_omega() {
        for t in 0..instance.n_theta() {
            for b in 0..instance.n_budgets() {
                let p = instance.prior(w, t, b);
                if p != 0.0 {
                    prior.push(PriorEntry {
                        omega: instance.omega_labels()[w].clone(),
                        theta: instance.theta_labels()[t].clone(),
                        b: instance.budget(b),
                        p,
                    });
                }
            }
            for a in 0..instance.n_actions() {
                utility.push(UtilityEntry {
                    omega: instance.omega_labels()[w].clone(),
                    theta: instance.theta_labels()[t].clone(),
                    a: instance.action_labels()[a].clone(),
                    u: instance.utility(w, t, a),
                });
            }
        }
    }
    let doc = InstanceDoc {
        omega: instance.omega_labels().to_vec(),
        theta: instance.theta_labels().to_vec(),
        actions: instance.action_labels().to_vec(),
        budgets: instance.budget_levels().to_vec(),
        seller_budget: instance.seller_budget(),
        prior,
        utility,
    };
    serde_json::to_string_pretty(&doc).expect("instance documents serialize") + "\n"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PaymentRepr {
    Fixed(f64),
    Lottery {
        #[serde(rename = "+")]
        pay: f64,
        #[serde(rename = "-")]
        refund: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KernelEntry {
    #[serde(deserialize_with = "label::deserialize")]
    theta: String,
    b: f64,
    #[serde(deserialize_with = "label::deserialize")]
    omega: String,
    #[serde(deserialize_with = "label::deserialize")]
    action: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    indicator: Option<String>,
    p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MechanismDoc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    public_budget: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seller_budget: Option<f64>,
    payments: BTreeMap<String, PaymentRepr>,
    kernel: Vec<KernelEntry>,
    #[serde(default)]
    revenue: Option<f64>,
    #[serde(default)]
    utilities: BTreeMap<String, f64>,
}

/// Mechanism document with its exact revenue and truthful utilities under
/// the instance prior. Kernel entries that are zero are omitted.
pub fn mechanism_to_json(mechanism: &Mechanism, instance: &Instance) -> Result<String> {
    let view = MenuView::new(mechanism, instance)?;
    let vi = &view.instance;
    let beliefs = Beliefs::from_instance(vi);
    let mut payments = BTreeMap::new();
    let mut kernel = Vec::new();
    let key = |i: usize| match mechanism {
        Mechanism::DirectPayment(_) => vi.theta_labels()[vi.type_at(i).theta].clone(),
        _ => vi.type_key(vi.type_at(i)),
    };
    for (i, offer) in view.offers.iter().enumerate() {
        let ty = vi.type_at(i);
        let b = vi.budget(ty.budget);
        let payment = match mechanism {
            Mechanism::ProbReturn(p) => PaymentRepr::Lottery { pay: b, refund: -p.seller_budget },
            _ => PaymentRepr::Fixed(view.posted.as_ref().expect("posted")[i]),
        };
        payments.insert(key(i), payment);
        for w in 0..vi.n_omega() {
            for (s, sig) in offer.signals.iter().enumerate() {
                let p = offer.prob(w, s);
                if p != 0.0 {
                    kernel.push(KernelEntry {
                        theta: vi.theta_labels()[ty.theta].clone(),
                        b,
                        omega: vi.omega_labels()[w].clone(),
                        action: vi.action_labels()[sig.action].clone(),
                        indicator: sig.indicator.map(|x| x.symbol().to_string()),
                        p,
                    });
                }
            }
        }
    }
    let utilities = beliefs
        .active_types()
        .into_iter()
        .map(|i| {
            let ty = vi.type_at(i);
            (key(i), view.obedient_utility(beliefs.conditional(i).expect("active").probs(), ty.theta, i))
        })
        .collect();
    let doc = MechanismDoc {
        kind: mechanism.kind().as_str().to_string(),
        public_budget: match mechanism {
            Mechanism::DirectPayment(m) => Some(m.public_budget),
            _ => None,
        },
        seller_budget: match mechanism {
            Mechanism::ProbReturn(m) => Some(m.seller_budget),
            _ => None,
        },
        payments,
        kernel,
        revenue: Some(view.revenue(&beliefs)),
        utilities,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Parses a mechanism document against an instance. Unlisted kernel entries
/// are zero; `revenue` and `utilities` are ignored.
pub fn mechanism_from_json(text: &str, instance: &Instance) -> Result<Mechanism> {
    let doc: MechanismDoc = serde_json::from_str(text)?;
    let kind = MechanismKind::parse(&doc.kind)
        .ok_or_else(|| Error::UnknownLabel { kind: "mechanism kind", label: doc.kind.clone() })?;
    let (no, na) = (instance.n_omega(), instance.n_actions());
    let fixed = |key: &str| -> Result<f64> {
        match doc.payments.get(key) {
            Some(PaymentRepr::Fixed(t)) => Ok(*t),
            Some(PaymentRepr::Lottery { .. }) => {
                Err(Error::ShapeMismatch(format!("payment for `{key}` must be a number for {}", doc.kind)))
            }
            None => Err(Error::ShapeMismatch(format!("missing payment for `{key}`"))),
        }
    };
    match kind {
        MechanismKind::DirectPayment => {
            let public_budget =
                doc.public_budget.ok_or_else(|| Error::ShapeMismatch("dirp needs public_budget".into()))?;
            let payment = instance.theta_labels().iter().map(|l| fixed(l)).collect::<Result<Vec<_>>>()?;
            let mut kernel = vec![vec![0.0; no * na]; instance.n_theta()];
            for e in &doc.kernel {
                if e.indicator.is_some() {
                    return Err(Error::ShapeMismatch("indicator given for a dirp kernel entry".into()));
                }
                let (t, w, a) = (
                    instance.theta_index(&e.theta)?,
                    instance.omega_index(&e.omega)?,
                    instance.action_index(&e.action)?,
                );
                kernel[t][w * na + a] = e.p;
            }
            Ok(Mechanism::DirectPayment(DirectPaymentMechanism { public_budget, payment, kernel }))
        }
        MechanismKind::DepositReturn | MechanismKind::SingleRound => {
            let payment = instance.types().map(|ty| fixed(&instance.type_key(ty))).collect::<Result<Vec<_>>>()?;
            let mut kernel = vec![vec![0.0; no * na]; instance.n_types()];
            for e in &doc.kernel {
                if e.indicator.is_some() {
                    return Err(Error::ShapeMismatch(format!("indicator given for a {} kernel entry", doc.kind)));
                }
                let ty = instance.buyer_type(&e.theta, e.b)?;
                let (w, a) = (instance.omega_index(&e.omega)?, instance.action_index(&e.action)?);
                kernel[instance.type_index(ty)][w * na + a] = e.p;
            }
            let m = DepositReturnMechanism { payment, kernel };
            Ok(if kind == MechanismKind::DepositReturn {
                Mechanism::DepositReturn(m)
            } else {
                Mechanism::SingleRound(m)
            })
        }
        MechanismKind::ProbReturn => {
            let seller_budget = doc.seller_budget.unwrap_or(instance.seller_budget());
            let mut pay = vec![vec![0.0; no * na]; instance.n_types()];
            let mut refund = vec![vec![0.0; no * na]; instance.n_types()];
            for e in &doc.kernel {
                let ty = instance.buyer_type(&e.theta, e.b)?;
                let (w, a) = (instance.omega_index(&e.omega)?, instance.action_index(&e.action)?);
                let target = match e.indicator.as_deref() {
                    Some("+") => &mut pay,
                    Some("-") => &mut refund,
                    other => {
                        return Err(Error::ShapeMismatch(format!(
                            "probr kernel indicator must be + or -, got {other:?}"
                        )))
                    }
                };
                target[instance.type_index(ty)][w * na + a] = e.p;
            }
            Ok(Mechanism::ProbReturn(ProbReturnMechanism { seller_budget, pay, refund }))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ReportDoc {
    #[serde(deserialize_with = "label::deserialize")]
    theta: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TransitionDoc {
    #[serde(deserialize_with = "label::deserialize")]
    omega: String,
    child_index: usize,
    p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NodeDoc {
    Seller {
        children: Vec<NodeDoc>,
        transitions: Vec<TransitionDoc>,
        #[serde(flatten)]
        meta: NodeMeta,
    },
    Buyer {
        children: Vec<NodeDoc>,
        #[serde(flatten)]
        meta: NodeMeta,
    },
    Transfer {
        amount: f64,
        child: Box<NodeDoc>,
        #[serde(flatten)]
        meta: NodeMeta,
    },
    Leaf {
        #[serde(flatten)]
        meta: NodeMeta,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct NodeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<ReportDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Nested protocol document. Zero transition probabilities are omitted.
pub fn protocol_to_json(tree: &ProtocolTree, instance: &Instance) -> Result<String> {
    fn go(tree: &ProtocolTree, instance: &Instance, id: NodeId) -> NodeDoc {
        let node = tree.node(id);
        let meta = NodeMeta {
            report: node.report.map(|r| ReportDoc {
                theta: instance.theta_labels()[r.theta].clone(),
                b: r.budget.map(|b| instance.budget(b)),
            }),
            label: node.label.clone(),
        };
        match &node.kind {
            NodeKind::Leaf => NodeDoc::Leaf { meta },
            NodeKind::Transfer { amount, child } => {
                NodeDoc::Transfer { amount: *amount, child: Box::new(go(tree, instance, *child)), meta }
            }
            NodeKind::Buyer { children } => {
                NodeDoc::Buyer { children: children.iter().map(|&c| go(tree, instance, c)).collect(), meta }
            }
            NodeKind::Seller { children, transitions } => {
                let mut ts = Vec::new();
                for (w, row) in transitions.iter().enumerate() {
                    for (k, &p) in row.iter().enumerate() {
                        if p != 0.0 {
                            ts.push(TransitionDoc { omega: instance.omega_labels()[w].clone(), child_index: k, p });
                        }
                    }
                }
                NodeDoc::Seller {
                    children: children.iter().map(|&c| go(tree, instance, c)).collect(),
                    transitions: ts,
                    meta,
                }
            }
        }
    }
    tree.validate(instance)?;
    let doc = go(tree, instance, tree.root()?);
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Parses a nested protocol document and validates it against the instance.
pub fn protocol_from_json(text: &str, instance: &Instance) -> Result<ProtocolTree> {
    fn go(doc: NodeDoc, instance: &Instance, tree: &mut ProtocolTree) -> Result<NodeId> {
        let (id, meta) = match doc {
            NodeDoc::Leaf { meta } => (tree.leaf(), meta),
            NodeDoc::Transfer { amount, child, meta } => {
                let c = go(*child, instance, tree)?;
                (tree.transfer(amount, c), meta)
            }
            NodeDoc::Buyer { children, meta } => {
                let cs = children.into_iter().map(|c| go(c, instance, tree)).collect::<Result<Vec<_>>>()?;
                (tree.buyer(cs), meta)
            }
            NodeDoc::Seller { children, transitions, meta } => {
                let k = children.len();
                let cs = children.into_iter().map(|c| go(c, instance, tree)).collect::<Result<Vec<_>>>()?;
                let mut rows = vec![vec![0.0; k]; instance.n_omega()];
                for t in transitions {
                    let w = instance.omega_index(&t.omega)?;
                    if t.child_index >= k {
                        return Err(Error::ProtocolInvalid(format!("child_index {} out of range", t.child_index)));
                    }
                    rows[w][t.child_index] += t.p;
                }
                (tree.seller(cs, rows), meta)
            }
        };
        if let Some(r) = meta.report {
            let theta = instance.theta_index(&r.theta)?;
            let budget = r.b.map(|b| instance.budget_index(b)).transpose()?;
            tree.tag(id, ReportTag { theta, budget });
        }
        if let Some(l) = meta.label {
            tree.label(id, l);
        }
        Ok(id)
    }
    let doc: NodeDoc = serde_json::from_str(text)?;
    let mut tree = ProtocolTree::new();
    let root = go(doc, instance, &mut tree)?;
    tree.set_root(root);
    tree.validate(instance)?;
    Ok(tree)
}
