//! Shift-aware synthetic teacher targets.
//!
//! The shift between two distributions is carried as a log-ratio. The
//! canonical target combines the finetuned teacher with the α-scaled shift
//! between the raw student and the raw teacher:
//!
//! ```text
//! log target = log t_ft + α (log s_raw − log t_raw) − log Z
//! ```
//!
//! where `log Z` is the per-position log partition function. The eight
//! parallel variants permute which of the four models plays the KL student,
//! the base of the target, and the two ends of the shift.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{lse_slice, normalize_log_in_place, LogProbRow};

/// Strength of the shift term, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::domain(format!("alpha must lie in [0, 1], got {alpha}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// The four model distributions that take part in a distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Student before finetuning (frozen).
    SmallRaw,
    /// The student being trained.
    SmallTrainable,
    /// Teacher before finetuning (frozen).
    LargeRaw,
    /// Teacher after finetuning (frozen).
    LargeFt,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::SmallRaw,
        Role::SmallTrainable,
        Role::LargeRaw,
        Role::LargeFt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Role::SmallRaw => "small-raw",
            Role::SmallTrainable => "small-trainable",
            Role::LargeRaw => "large-raw",
            Role::LargeFt => "large-ft",
        }
    }

    pub fn is_trainable(self) -> bool {
        self == Role::SmallTrainable
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantId {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
    V8,
}

impl VariantId {
    pub const ALL: [VariantId; 8] = [
        VariantId::V1,
        VariantId::V2,
        VariantId::V3,
        VariantId::V4,
        VariantId::V5,
        VariantId::V6,
        VariantId::V7,
        VariantId::V8,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn spec(self) -> VariantSpec {
        VARIANTS[self.index()]
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.index() + 1)
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: usize = s
            .trim()
            .trim_start_matches(['v', 'V'])
            .parse()
            .map_err(|_| Error::domain(format!("unknown variant {s:?}")))?;
        VariantId::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::domain(format!("unknown variant {s:?}")))
    }
}

/// Role assignment for one parallel variant.
///
/// The target is `normalize(base + α (minuend − subtrahend))` in log space
/// and the loss is `KL(target ‖ kl_student)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub id: VariantId,
    pub kl_student: Role,
    pub target_base: Role,
    pub shift_minuend: Role,
    pub shift_subtrahend: Role,
    /// Tunability as observed in training; `classify_tunability` must agree.
    pub tunable: bool,
}

impl VariantSpec {
    pub fn roles(&self) -> [Role; 4] {
        [
            self.kl_student,
            self.target_base,
            self.shift_minuend,
            self.shift_subtrahend,
        ]
    }
}

use Role::{LargeFt, LargeRaw, SmallRaw, SmallTrainable};

const fn variant(
    id: VariantId,
    kl_student: Role,
    target_base: Role,
    shift_minuend: Role,
    shift_subtrahend: Role,
    tunable: bool,
) -> VariantSpec {
    VariantSpec {
        id,
        kl_student,
        target_base,
        shift_minuend,
        shift_subtrahend,
        tunable,
    }
}

/// The parallel-variant table.
pub const VARIANTS: [VariantSpec; 8] = [
    variant(VariantId::V1, SmallTrainable, SmallRaw, LargeFt, LargeRaw, true),
    variant(VariantId::V2, SmallTrainable, LargeFt, SmallRaw, LargeRaw, true),
    variant(VariantId::V3, LargeFt, LargeRaw, SmallTrainable, SmallRaw, false),
    variant(VariantId::V4, LargeFt, SmallTrainable, LargeRaw, SmallRaw, true),
    variant(VariantId::V5, SmallRaw, LargeRaw, SmallTrainable, LargeFt, false),
    variant(VariantId::V6, SmallRaw, SmallTrainable, LargeRaw, LargeFt, true),
    variant(VariantId::V7, LargeRaw, LargeFt, SmallRaw, SmallTrainable, false),
    variant(VariantId::V8, LargeRaw, SmallRaw, LargeFt, SmallTrainable, false),
];

/// True iff the trainable student is the KL student or the target base,
/// i.e. it does not appear inside the shift term.
pub fn classify_tunability(roles: &VariantSpec) -> bool {
    let outside = roles.kl_student.is_trainable() || roles.target_base.is_trainable();
    let inside = roles.shift_minuend.is_trainable() || roles.shift_subtrahend.is_trainable();
    outside && !inside
}

/// Checks that the four roles are distinct.
pub fn validate_spec(spec: &VariantSpec) -> Result<()> {
    let roles = spec.roles();
    for i in 0..4 {
        for j in i + 1..4 {
            if roles[i] == roles[j] {
                return Err(Error::domain(format!(
                    "variant {} assigns {} twice",
                    spec.id, roles[i]
                )));
            }
        }
    }
    Ok(())
}

/// Tab-separated manifest of the variant table with a header line.
pub fn variant_manifest() -> String {
    let mut out = String::from("id\tkl_student\ttarget_base\tshift_minuend\tshift_subtrahend\ttunable\n");
    for v in &VARIANTS {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            v.id, v.kl_student, v.target_base, v.shift_minuend, v.shift_subtrahend, v.tunable
        ));
    }
    out
}

/// Per-position distributions of all four roles.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleQuad {
    pub student_raw: LogProbRow,
    pub teacher_raw: LogProbRow,
    pub teacher_ft: LogProbRow,
    pub student_trainable: LogProbRow,
}

impl RoleQuad {
    pub fn new(
        student_raw: LogProbRow,
        teacher_raw: LogProbRow,
        teacher_ft: LogProbRow,
        student_trainable: LogProbRow,
    ) -> Result<Self> {
        let v = student_raw.len();
        if teacher_raw.len() != v || teacher_ft.len() != v || student_trainable.len() != v {
            return Err(Error::domain("role quad rows differ in vocabulary size"));
        }
        Ok(Self {
            student_raw,
            teacher_raw,
            teacher_ft,
            student_trainable,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.student_raw.len()
    }

    pub fn row(&self, role: Role) -> &LogProbRow {
        match role {
            Role::SmallRaw => &self.student_raw,
            Role::SmallTrainable => &self.student_trainable,
            Role::LargeRaw => &self.teacher_raw,
            Role::LargeFt => &self.teacher_ft,
        }
    }
}

/// Log-ratio between two distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaShift(Vec<f64>);

impl DeltaShift {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Probability-space ratio `p1 / p2`.
    pub fn ratio(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.exp()).collect()
    }
}

pub fn delta_shift(numerator: &LogProbRow, denominator: &LogProbRow) -> Result<DeltaShift> {
    if numerator.len() != denominator.len() {
        return Err(Error::domain(format!(
            "delta_shift length mismatch: {} vs {}",
            numerator.len(),
            denominator.len()
        )));
    }
    let values: Vec<f64> = numerator
        .values()
        .iter()
        .zip(denominator.values())
        .map(|(a, b)| a - b)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("delta_shift over a zero-probability entry"));
    }
    Ok(DeltaShift(values))
}

/// Canonical synthetic target, normalized. Returns `log Z` alongside.
pub fn synth_target_with_log_z(quad: &RoleQuad, alpha: Alpha) -> (LogProbRow, f64) {
    let mut out = vec![0.0; quad.vocab_size()];
    let log_z = synth_target_into(
        quad.student_raw.values(),
        quad.teacher_raw.values(),
        quad.teacher_ft.values(),
        alpha.get(),
        &mut out,
    );
    (LogProbRow::from_normalized(out), log_z)
}

pub fn synth_target(quad: &RoleQuad, alpha: Alpha) -> LogProbRow {
    synth_target_with_log_z(quad, alpha).0
}

/// Writes `log t_ft + α (log s_raw − log t_raw)` into `out` and normalizes
/// it; returns the log partition function.
pub fn synth_target_into(
    student_raw: &[f64],
    teacher_raw: &[f64],
    teacher_ft: &[f64],
    alpha: f64,
    out: &mut [f64],
) -> f64 {
    if alpha == 0.0 {
        // ratio^0 = 1 exactly; keeps the boundary bit-identical to t_ft
        out.copy_from_slice(teacher_ft);
        return 0.0;
    }
    for i in 0..out.len() {
        out[i] = teacher_ft[i] + alpha * (student_raw[i] - teacher_raw[i]);
    }
    normalize_log_in_place(out)
}

/// Output of [`parallel_target`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelTarget {
    pub target: LogProbRow,
    pub kl_student: LogProbRow,
}

/// Builds the target and picks the KL student row of a parallel variant.
///
/// Variants that put the trainable student inside the shift term are
/// rejected unless `allow_nontunable` is set.
pub fn parallel_target(
    spec: &VariantSpec,
    quad: &RoleQuad,
    alpha: Alpha,
    allow_nontunable: bool,
) -> Result<ParallelTarget> {
    validate_spec(spec)?;
    if !allow_nontunable && !classify_tunability(spec) {
        return Err(Error::NonTunable(spec.id.to_string()));
    }
    let base = quad.row(spec.target_base).values();
    let minuend = quad.row(spec.shift_minuend).values();
    let subtrahend = quad.row(spec.shift_subtrahend).values();
    let a = alpha.get();
    let mut u: Vec<f64> = (0..quad.vocab_size())
        .map(|i| base[i] + a * (minuend[i] - subtrahend[i]))
        .collect();
    normalize_log_in_place(&mut u);
    Ok(ParallelTarget {
        target: LogProbRow::from_normalized(u),
        kl_student: quad.row(spec.kl_student).clone(),
    })
}

/// `log Z` of an arbitrary unnormalized log vector; exposed for tests and
/// diagnostics.
pub fn log_partition(unnormalized: &[f64]) -> f64 {
    lse_slice(unnormalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ProbRow;

    fn lp(p: &[f64]) -> LogProbRow {
        ProbRow::new(p.to_vec()).unwrap().to_log()
    }

    fn worked_quad() -> RoleQuad {
        RoleQuad::new(
            lp(&[0.5, 0.5]),
            lp(&[0.9, 0.1]),
            lp(&[0.8, 0.2]),
            lp(&[0.5, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn alpha_range() {
        assert!(Alpha::new(0.0).is_ok());
        assert!(Alpha::new(1.0).is_ok());
        assert!(Alpha::new(1.01).is_err());
        assert!(Alpha::new(-0.1).is_err());
        assert!(Alpha::new(f64::NAN).is_err());
    }

    #[test]
    fn shift_examples() {
        let p = lp(&[0.8, 0.2]);
        let q = lp(&[0.5, 0.5]);
        assert!(delta_shift(&p, &p).unwrap().values().iter().all(|v| *v == 0.0));
        let d = delta_shift(&p, &q).unwrap();
        let r = d.ratio();
        assert!((r[0] - 1.6).abs() < 1e-15 && (r[1] - 0.4).abs() < 1e-15);
        assert!((d.values()[0] - 1.6f64.ln()).abs() < 1e-15);
        let back = delta_shift(&q, &p).unwrap();
        for (a, b) in d.values().iter().zip(back.values()) {
            assert_eq!(*a, -*b);
        }
        assert!(delta_shift(&p, &lp(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn worked_two_token_target() {
        // unnormalized: 0.8 * 0.5/0.9 = 0.4444.., 0.2 * 0.5/0.1 = 1.0
        let (t, log_z) = synth_target_with_log_z(&worked_quad(), Alpha::new(1.0).unwrap());
        let un: [f64; 2] = [0.8 * 0.5 / 0.9, 0.2 * 0.5 / 0.1];
        let z = un[0] + un[1];
        assert!((log_z - z.ln()).abs() < 1e-14);
        assert!((t.values()[0].exp() - un[0] / z).abs() < 1e-14);
        assert!((t.values()[0].exp() - 0.307692).abs() < 1e-6);
        assert!((t.values()[1].exp() - 0.692308).abs() < 1e-6);
        assert!((z - 1.44444).abs() < 1e-5);
    }

    #[test]
    fn alpha_zero_is_teacher_ft() {
        let q = worked_quad();
        let (t, log_z) = synth_target_with_log_z(&q, Alpha::new(0.0).unwrap());
        assert_eq!(t, q.teacher_ft);
        assert_eq!(log_z, 0.0);
    }

    #[test]
    fn equal_raw_models_give_teacher_ft() {
        let mut q = worked_quad();
        q.student_raw = q.teacher_raw.clone();
        for a in [0.0, 0.3, 1.0] {
            let t = synth_target(&q, Alpha::new(a).unwrap());
            for (x, y) in t.values().iter().zip(q.teacher_ft.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_tunability_column() {
        let flags: Vec<bool> = VARIANTS.iter().map(classify_tunability).collect();
        assert_eq!(flags, [true, true, false, true, false, true, false, false]);
        for v in &VARIANTS {
            assert_eq!(classify_tunability(v), v.tunable);
            validate_spec(v).unwrap();
        }
    }

    #[test]
    fn strict_mode_rejects_nontunable() {
        let q = worked_quad();
        let a = Alpha::new(0.5).unwrap();
        for id in [VariantId::V3, VariantId::V5, VariantId::V7, VariantId::V8] {
            let err = parallel_target(&id.spec(), &q, a, false).unwrap_err();
            assert!(matches!(err, Error::NonTunable(_)));
            assert!(parallel_target(&id.spec(), &q, a, true).is_ok());
        }
    }

    #[test]
    fn v1_matches_canonical_at_alpha_one() {
        let q = worked_quad();
        let a = Alpha::new(1.0).unwrap();
        let pt = parallel_target(&VariantId::V1.spec(), &q, a, false).unwrap();
        let t = synth_target(&q, a);
        for (x, y) in pt.target.values().iter().zip(t.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(pt.kl_student, q.student_trainable);
    }

    #[test]
    fn v6_without_teacher_shift_is_trainable_row() {
        let mut q = worked_quad();
        q.teacher_ft = q.teacher_raw.clone();
        q.student_trainable = lp(&[0.3, 0.7]);
        let pt = parallel_target(&VariantId::V6.spec(), &q, Alpha::new(0.8).unwrap(), false).unwrap();
        for (x, y) in pt.target.values().iter().zip(q.student_trainable.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(pt.kl_student, q.student_raw);
    }

    #[test]
    fn duplicate_roles_rejected() {
        let mut spec = VariantId::V1.spec();
        spec.target_base = Role::SmallTrainable;
        assert!(validate_spec(&spec).is_err());
    }

    #[test]
    fn variant_parsing_and_manifest() {
        assert_eq!("V4".parse::<VariantId>().unwrap(), VariantId::V4);
        assert_eq!("v8".parse::<VariantId>().unwrap(), VariantId::V8);
        assert!("V9".parse::<VariantId>().is_err());
        assert!("V0".parse::<VariantId>().is_err());
        let m = variant_manifest();
        assert_eq!(m.lines().count(), 9);
        assert!(m.contains("V3\tlarge-ft\tlarge-raw\tsmall-trainable\tsmall-raw\tfalse"));
    }
}
