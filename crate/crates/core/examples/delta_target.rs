//! Synthetic target on a two-token vocabulary, then the parallel variants.
//!
//! cargo run --example delta_target

use deltakd::delta_target::{delta_shift, parallel_target, synth_target_with_log_z, variant_manifest, Alpha, RoleQuad, VariantId};
use deltakd::numerics::ProbRow;

fn lp(p: &[f64]) -> deltakd::numerics::LogProbRow {
    ProbRow::new(p.to_vec()).unwrap().to_log()
}

fn main() -> deltakd::error::Result<()> {
    let quad = RoleQuad::new(
        lp(&[0.5, 0.5]), // student_raw
        lp(&[0.9, 0.1]), // teacher_raw
        lp(&[0.8, 0.2]), // teacher_ft
        lp(&[0.6, 0.4]), // trainable student
    )?;

    let shift = delta_shift(&quad.student_raw, &quad.teacher_raw)?;
    println!("shift ratio student_raw/teacher_raw = {:?}", shift.ratio());

    for a in [0.0, 0.5, 1.0] {
        let (t, log_z) = synth_target_with_log_z(&quad, Alpha::new(a)?);
        let p = t.to_probs();
        println!("alpha={a:<4} target={:.6?} log_z={log_z:.6}", p.values());
    }

    println!("\n{}", variant_manifest());
    let a = Alpha::new(0.5)?;
    for v in VariantId::ALL {
        match parallel_target(&v.spec(), &quad, a, false) {
            Ok(pt) => println!("{v}: target={:.4?}", pt.target.to_probs().values()),
            Err(e) => println!("{v}: {e}"),
        }
    }
    Ok(())
}
