//! Finite-difference check of every tunable objective on a tiny transformer.
//!
//! cargo run --release --example gradcheck

use deltakd::engine::{check_objective, DistillMethod, ObjectiveCheck};

fn main() -> deltakd::error::Result<()> {
    for m in ["sft", "fkl", "rkl", "delta", "v1", "v2", "v4", "v6"] {
        let method: DistillMethod = m.parse()?;
        let r = check_objective(&ObjectiveCheck::new(method))?;
        println!("{:<12} max_rel_error={:.2e} mean_rel_error={:.2e}", method.label(), r.max_rel_error, r.mean_rel_error);
    }
    // non-tunable variants still have correct gradients; they are just
    // rejected for training by default
    let r = check_objective(&ObjectiveCheck::new("v3".parse()?))?;
    println!("{:<12} max_rel_error={:.2e}", "V3", r.max_rel_error);
    Ok(())
}
