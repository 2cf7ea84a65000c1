//! Loss values and the per-position objective gradient for one position.
//!
//! cargo run --example losses

use deltakd::delta_target::{Alpha, RoleQuad};
use deltakd::losses::objective::{position_loss, PositionRows, Scratch};
use deltakd::losses::{delta_kd_loss, fkl_loss, rkl_loss, sft_loss, total_loss, KdObjective, Lambda, ObjectiveConfig};
use deltakd::numerics::{log_softmax, LogitRow, Temperature};

fn main() -> deltakd::error::Result<()> {
    let one = Temperature::ONE;
    let row = |z: &[f64]| log_softmax(&LogitRow::new(z.to_vec()).unwrap(), one);
    let student_raw = row(&[0.0, 0.0, 0.0]);
    let teacher_raw = row(&[2.0, 0.0, -1.0]);
    let teacher_ft = row(&[0.5, 2.0, -1.0]);
    let z_theta = [0.3, 0.1, -0.2];
    let theta = row(&z_theta);

    let mask = [true];
    let sft = sft_loss(&[1], std::slice::from_ref(&theta), &mask)?;
    let fkl = fkl_loss(std::slice::from_ref(&teacher_ft), std::slice::from_ref(&theta), &mask)?;
    let rkl = rkl_loss(std::slice::from_ref(&teacher_ft), std::slice::from_ref(&theta), &mask)?;
    let quad = RoleQuad::new(student_raw.clone(), teacher_raw.clone(), teacher_ft.clone(), theta)?;
    let delta = delta_kd_loss(&[quad], Alpha::new(1.0)?, &mask)?;
    println!("sft={sft:.6} fkl={fkl:.6} rkl={rkl:.6} delta(alpha=1)={delta:.6}");
    println!("{:?}", total_loss(Lambda::new(0.5)?, sft, delta, 1));

    // the same numbers through the training objective, with dL/dz
    let cfg = ObjectiveConfig::new(KdObjective::Delta(Alpha::new(1.0)?), Lambda::new(0.5)?);
    let rows = PositionRows {
        target: 1,
        student_raw: Some(student_raw.values()),
        teacher_raw: Some(teacher_raw.values()),
        teacher_ft: Some(teacher_ft.values()),
    };
    let mut grad = vec![0.0; 3];
    let (s, k) = position_loss(&cfg, &z_theta, &rows, &mut Scratch::default(), Some((&mut grad, 1.0)))?;
    println!("objective sft={s:.6} kd={k:.6} dL/dz={grad:.6?}");
    Ok(())
}
