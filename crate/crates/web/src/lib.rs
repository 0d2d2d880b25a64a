//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic
//! can be tested natively.

use infosell::formats;
use infosell::mechanisms::{self, MechanismSolution};
use infosell::Instance;
use wasm_bindgen::prelude::*;

/// Order of the values returned by [`treasure_box`].
pub const TREASURE_BOX_FIELDS: [&str; 7] = ["surplus0", "surplus1", "cap", "single_round", "depr", "probr", "dirp"];

fn check_inputs(z0: f64, z1: f64, b0: f64, b1: f64, m: f64) -> Result<(), String> {
    for (name, v) in [("z0", z0), ("z1", z1), ("M", m)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("{name} must be a non-negative number"));
        }
    }
    for (name, v) in [("b0", b0), ("b1", b1)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(format!("{name} must be positive"));
        }
    }
    Ok(())
}

fn revenue(sol: infosell::Result<MechanismSolution>) -> Result<f64, String> {
    sol.map(|s| s.revenue).map_err(|e| e.to_string())
}

/// Surpluses, revenue cap and optimal revenues of the treasure box, in the
/// order of [`TREASURE_BOX_FIELDS`]. Direct payment uses the smaller
/// budget as the public one.
pub fn treasure_box_values(z0: f64, z1: f64, b0: f64, b1: f64, m: f64) -> Result<Vec<f64>, String> {
    check_inputs(z0, z1, b0, b1, m)?;
    let inst = Instance::treasure_box_with(z0, z1, b0, b1, m);
    let t0 = inst.buyer_type("0", b0).map_err(|e| e.to_string())?;
    let t1 = inst.buyer_type("1", b1).map_err(|e| e.to_string())?;
    Ok(vec![
        inst.surplus(t0).map_err(|e| e.to_string())?,
        inst.surplus(t1).map_err(|e| e.to_string())?,
        inst.revenue_cap(),
        revenue(mechanisms::solve_single_round(&inst))?,
        revenue(mechanisms::solve_cm_depr(&inst))?,
        revenue(mechanisms::solve_cm_probr(&inst))?,
        revenue(mechanisms::solve_cm_dirp(&inst, b0.min(b1)))?,
    ])
}

/// Sweeps the first type's budget over `steps` evenly spaced points in
/// `[lo, hi]`. Returns rows `[b0, single_round, depr, cap]` flattened.
pub fn budget_sweep_values(
    z0: f64,
    z1: f64,
    b1: f64,
    m: f64,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<f64>, String> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || !(2..=500).contains(&steps) {
        return Err("need 0 < lo <= hi and 2 <= steps <= 500".into());
    }
    let mut out = Vec::with_capacity(4 * steps);
    for i in 0..steps {
        let b0 = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        check_inputs(z0, z1, b0, b1, m)?;
        let inst = Instance::treasure_box_with(z0, z1, b0, b1, m);
        out.extend([
            b0,
            revenue(mechanisms::solve_single_round(&inst))?,
            revenue(mechanisms::solve_cm_depr(&inst))?,
            inst.revenue_cap(),
        ]);
    }
    Ok(out)
}

/// Solves a pasted instance document and returns the mechanism document.
pub fn solve_json(instance: &str, kind: &str, public_budget: Option<f64>) -> Result<String, String> {
    let inst = formats::instance_from_json(instance).map_err(|e| e.to_string())?;
    let sol = match kind {
        "depr" => mechanisms::solve_cm_depr(&inst),
        "probr" => mechanisms::solve_cm_probr(&inst),
        "single-round" => mechanisms::solve_single_round(&inst),
        "dirp" => {
            let b = match (public_budget, inst.budget_levels()) {
                (Some(b), _) => b,
                (None, [b]) => *b,
                (None, _) => return Err("dirp needs a public budget when budgets vary".into()),
            };
            mechanisms::solve_cm_dirp(&inst, b)
        }
        other => return Err(format!("unknown mechanism `{other}`")),
    }
    .map_err(|e| e.to_string())?;
    formats::mechanism_to_json(&sol.mechanism, &inst).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn treasure_box(z0: f64, z1: f64, b0: f64, b1: f64, m: f64) -> Result<Vec<f64>, JsError> {
    treasure_box_values(z0, z1, b0, b1, m).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn budget_sweep(z0: f64, z1: f64, b1: f64, m: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    budget_sweep_values(z0, z1, b1, m, lo, hi, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn solve_instance(instance: &str, kind: &str, public_budget: Option<f64>) -> Result<String, JsError> {
    solve_json(instance, kind, public_budget).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn example_instance() -> String {
    formats::instance_to_json(&Instance::treasure_box())
}
