//! Solver-agnostic linear programs.
//!
//! Mechanism builders declare named variables and constraints here and never
//! touch the backend. The backend is `microlp` (dual/primal simplex); every
//! optimal point it returns is re-checked against the program by an
//! independent evaluation pass before it is handed back.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Feasibility tolerance for returned optima.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("duplicate constraint name `{0}`")]
    DuplicateConstraint(String),
    #[error("variable `{name}` has inverted bounds [{lb}, {ub}]")]
    InvertedBounds { name: String, lb: f64, ub: f64 },
    #[error("coefficient references an undeclared variable (index {0})")]
    UnknownVariable(usize),
    #[error("non-finite coefficient in `{0}`")]
    NonFinite(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
}

/// Handle to a declared variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Clone, Debug)]
struct VarDef {
    name: String,
    lb: f64,
    ub: f64,
}

#[derive(Clone, Debug)]
struct ConstraintDef {
    name: String,
    terms: Vec<(Var, f64)>,
    relation: Relation,
    rhs: f64,
}

#[derive(Clone, Debug)]
pub struct LinearProgram {
    vars: Vec<VarDef>,
    var_names: HashMap<String, Var>,
    constraints: Vec<ConstraintDef>,
    constraint_names: HashMap<String, usize>,
    sense: Sense,
    objective: Vec<(Var, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: Status,
    /// Objective at the returned point; NaN unless optimal.
    pub objective: f64,
    values: Vec<f64>,
    names: Vec<String>,
}

impl Solution {
    pub fn value(&self, var: Var) -> f64 {
        self.values[var.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_by_name(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

impl Default for LinearProgram {
    fn default() -> Self {
        Self::new(Sense::Maximize)
    }
}

impl LinearProgram {
    pub fn new(sense: Sense) -> Self {
        Self {
            vars: Vec::new(),
            var_names: HashMap::new(),
            constraints: Vec::new(),
            constraint_names: HashMap::new(),
            sense,
            objective: Vec::new(),
        }
    }

    pub fn n_variables(&self) -> usize {
        self.vars.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn variable(&self, name: &str) -> Option<Var> {
        self.var_names.get(name).copied()
    }

    pub fn add_variable(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> Result<Var, LpError> {
        let name = name.into();
        if lb.is_nan() || ub.is_nan() || lb > ub || lb == f64::INFINITY || ub == f64::NEG_INFINITY {
            return Err(LpError::InvertedBounds { name, lb, ub });
        }
        if self.var_names.contains_key(&name) {
            return Err(LpError::DuplicateVariable(name));
        }
        let var = Var(self.vars.len());
        self.var_names.insert(name.clone(), var);
        self.vars.push(VarDef { name, lb, ub });
        Ok(var)
    }

    fn normalize(&self, context: &str, terms: &[(Var, f64)]) -> Result<Vec<(Var, f64)>, LpError> {
        let mut merged: Vec<(Var, f64)> = Vec::with_capacity(terms.len());
        let mut slot: HashMap<Var, usize> = HashMap::new();
        for &(var, coef) in terms {
            if var.0 >= self.vars.len() {
                return Err(LpError::UnknownVariable(var.0));
            }
            if !coef.is_finite() {
                return Err(LpError::NonFinite(context.to_string()));
            }
            match slot.get(&var) {
                Some(&i) => merged[i].1 += coef,
                None => {
                    slot.insert(var, merged.len());
                    merged.push((var, coef));
                }
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        Ok(merged)
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: &[(Var, f64)],
        relation: Relation,
        rhs: f64,
    ) -> Result<(), LpError> {
        let name = name.into();
        if self.constraint_names.contains_key(&name) {
            return Err(LpError::DuplicateConstraint(name));
        }
        if !rhs.is_finite() {
            return Err(LpError::NonFinite(name));
        }
        let terms = self.normalize(&name, terms)?;
        self.constraint_names.insert(name.clone(), self.constraints.len());
        self.constraints.push(ConstraintDef { name, terms, relation, rhs });
        Ok(())
    }

    pub fn set_objective(&mut self, sense: Sense, terms: &[(Var, f64)]) -> Result<(), LpError> {
        self.objective = self.normalize("objective", terms)?;
        self.sense = sense;
        Ok(())
    }

    /// Objective value at `values`.
    pub fn objective_at(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(v, c)| c * values[v.0]).sum()
    }

    /// Worst absolute violation of bounds and constraints at `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (def, &x) in self.vars.iter().zip(values) {
            worst = worst.max(def.lb - x).max(x - def.ub);
        }
        for c in &self.constraints {
            let lhs: f64 = c.terms.iter().map(|&(v, k)| k * values[v.0]).sum();
            let excess = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(excess);
        }
        worst
    }

    pub fn solve(&self) -> Result<Solution, LpError> {
        use microlp::{ComparisonOp, OptimizationDirection, Problem};

        let direction = match self.sense {
            Sense::Maximize => OptimizationDirection::Maximize,
            Sense::Minimize => OptimizationDirection::Minimize,
        };
        let mut obj = vec![0.0; self.vars.len()];
        for &(v, c) in &self.objective {
            obj[v.0] += c;
        }
        let mut problem = Problem::new(direction);
        let handles: Vec<microlp::Variable> =
            self.vars.iter().zip(&obj).map(|(def, &c)| problem.add_var(c, (def.lb, def.ub))).collect();
        for c in &self.constraints {
            let op = match c.relation {
                Relation::Le => ComparisonOp::Le,
                Relation::Eq => ComparisonOp::Eq,
                Relation::Ge => ComparisonOp::Ge,
            };
            let expr: microlp::LinearExpr = c.terms.iter().map(|&(v, k)| (handles[v.0], k)).collect();
            problem.add_constraint(expr, op, c.rhs);
        }
        let names = self.vars.iter().map(|d| d.name.clone()).collect();
        let empty = |status| Solution { status, objective: f64::NAN, values: Vec::new(), names: Vec::new() };
        match problem.solve() {
            Ok(sol) => {
                let values: Vec<f64> = handles.iter().map(|&h| *sol.var_value(h)).collect();
                let violation = self.max_violation(&values);
                if !violation.is_finite() || violation > FEASIBILITY_TOL {
                    return Err(LpError::SolverFailure(format!(
                        "returned point violates the program by {violation:.3e}"
                    )));
                }
                let objective = self.objective_at(&values);
                Ok(Solution { status: Status::Optimal, objective, values, names })
            }
            Err(microlp::Error::Infeasible) => Ok(empty(Status::Infeasible)),
            Err(microlp::Error::Unbounded) => Ok(empty(Status::Unbounded)),
            Err(microlp::Error::InternalError(msg)) => Err(LpError::SolverFailure(msg)),
        }
    }

    /// Dump in the CPLEX-style LP text format.
    pub fn to_lp_text(&self) -> String {
        fn expr(out: &mut String, terms: &[(Var, f64)], vars: &[VarDef]) {
            if terms.is_empty() {
                out.push_str(" 0");
            }
            for (i, &(v, c)) in terms.iter().enumerate() {
                let sign = if c < 0.0 {
                    " -"
                } else if i == 0 {
                    ""
                } else {
                    " +"
                };
                let _ = write!(out, "{sign} {} {}", c.abs(), vars[v.0].name);
            }
        }
        let mut out = String::new();
        out.push_str(match self.sense {
            Sense::Maximize => "Maximize\n obj:",
            Sense::Minimize => "Minimize\n obj:",
        });
        expr(&mut out, &self.objective, &self.vars);
        out.push_str("\nSubject To\n");
        for c in &self.constraints {
            let _ = write!(out, " {}:", c.name);
            expr(&mut out, &c.terms, &self.vars);
            let rel = match c.relation {
                Relation::Le => "<=",
                Relation::Eq => "=",
                Relation::Ge => ">=",
            };
            let _ = writeln!(out, " {rel} {}", c.rhs);
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            match (v.lb.is_finite(), v.ub.is_finite()) {
                (false, false) => {
                    let _ = writeln!(out, " {} free", v.name);
                }
                (true, false) => {
                    let _ = writeln!(out, " {} >= {}", v.name, v.lb);
                }
                (false, true) => {
                    let _ = writeln!(out, " -inf <= {} <= {}", v.name, v.ub);
                }
                (true, true) => {
                    let _ = writeln!(out, " {} <= {} <= {}", v.lb, v.name, v.ub);
                }
            }
        }
        out.push_str("End\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_max() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_variable("x", 0.0, f64::INFINITY).unwrap();
        lp.add_constraint("cap", &[(x, 1.0)], Relation::Le, 3.0).unwrap();
        lp.set_objective(Sense::Maximize, &[(x, 1.0)]).unwrap();
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!((sol.objective - 3.0).abs() < 1e-9);
        assert!((sol.value_by_name("x").unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn unbounded() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_variable("x", 0.0, f64::INFINITY).unwrap();
        lp.set_objective(Sense::Maximize, &[(x, 1.0)]).unwrap();
        assert_eq!(lp.solve().unwrap().status, Status::Unbounded);
    }

    #[test]
    fn infeasible() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_variable("x", f64::NEG_INFINITY, f64::INFINITY).unwrap();
        lp.add_constraint("lo", &[(x, 1.0)], Relation::Ge, 1.0).unwrap();
        lp.add_constraint("hi", &[(x, 1.0)], Relation::Le, 0.0).unwrap();
        lp.set_objective(Sense::Maximize, &[(x, 1.0)]).unwrap();
        assert_eq!(lp.solve().unwrap().status, Status::Infeasible);
    }

    #[test]
    fn variable_errors() {
        let mut lp = LinearProgram::default();
        lp.add_variable("p", 0.0, 1.0).unwrap();
        lp.add_variable("t", -2.0, 5.0).unwrap();
        assert_eq!(lp.add_variable("p", 0.0, 1.0), Err(LpError::DuplicateVariable("p".into())));
        assert!(matches!(lp.add_variable("q", 1.0, 0.0), Err(LpError::InvertedBounds { .. })));
        assert_eq!(lp.add_constraint("c", &[(Var(9), 1.0)], Relation::Le, 1.0), Err(LpError::UnknownVariable(9)));
        lp.add_constraint("c", &[], Relation::Le, 1.0).unwrap();
        assert!(matches!(lp.add_constraint("c", &[], Relation::Le, 1.0), Err(LpError::DuplicateConstraint(_))));
    }

    #[test]
    fn repeated_terms_merge() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_variable("x", 0.0, 10.0).unwrap();
        lp.add_constraint("twice", &[(x, 1.0), (x, 1.0)], Relation::Ge, 4.0).unwrap();
        lp.set_objective(Sense::Minimize, &[(x, 1.0)]).unwrap();
        let sol = lp.solve().unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn resolve_is_deterministic() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_variable("x", 0.0, 4.0).unwrap();
        let y = lp.add_variable("y", 0.0, 3.0).unwrap();
        lp.add_constraint("sum", &[(x, 1.0), (y, 1.0)], Relation::Le, 5.0).unwrap();
        lp.set_objective(Sense::Maximize, &[(x, 1.0), (y, 1.0)]).unwrap();
        let a = lp.solve().unwrap();
        let b = lp.solve().unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn lp_text_dump() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_variable("x", 0.0, 1.0).unwrap();
        let y = lp.add_variable("y", f64::NEG_INFINITY, f64::INFINITY).unwrap();
        lp.add_constraint("c1", &[(x, 2.0), (y, -1.0)], Relation::Le, 3.0).unwrap();
        lp.set_objective(Sense::Maximize, &[(x, 1.0)]).unwrap();
        let text = lp.to_lp_text();
        assert!(text.starts_with("Maximize\n obj: 1 x\nSubject To\n c1: 2 x - 1 y <= 3\n"));
        assert!(text.contains(" y free\n"));
        assert!(text.ends_with("End\n"));
    }
}
