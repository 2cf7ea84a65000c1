//! A tabular student trained with forward KL converges to its teacher's
//! conditionals; add-one counting gives the same table from samples.
//!
//! cargo run --release --example tabular_fixed_point

use deltakd::engine::{run_stage, FrozenRoles, StageSpec, TeacherHandle};
use deltakd::lm::{fit_tabular, AdamConfig, BigramModel, LanguageModel, LogitSource, TokenSeq};
use deltakd::losses::{KdObjective, Lambda, ObjectiveConfig};
use deltakd::numerics::{log_softmax_into, total_variation, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conditionals(m: &LanguageModel, v: usize) -> Vec<Vec<f64>> {
    let ctx: Vec<[TokenId; 1]> = (0..v as TokenId).map(|a| [a]).collect();
    let seqs: Vec<&[TokenId]> = ctx.iter().map(|c| c.as_slice()).collect();
    let logits = m.batch_logits(&seqs).unwrap();
    let mut lp = vec![0.0; v];
    (0..v)
        .map(|a| {
            log_softmax_into(logits.row(a, 0), 1.0, &mut lp);
            lp.iter().map(|x| x.exp()).collect()
        })
        .collect()
}

fn max_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| total_variation(p, q)).fold(0.0, f64::max)
}

fn main() -> deltakd::error::Result<()> {
    let v = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = (0..v * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let teacher = LanguageModel::Bigram(BigramModel::from_params(v, table)?);
    let want = conditionals(&teacher, v);

    let mut student = LanguageModel::Bigram(BigramModel::uniform(v)?);
    let data: Vec<TokenSeq> = (0..v as TokenId).map(|a| TokenSeq::new(vec![a, 0], 1)).collect::<Result<_, _>>()?;
    let spec = StageSpec {
        name: "tabular".into(),
        method: "fkl".into(),
        steps: 2000,
        batch_size: v,
        shuffle_seed: 1,
        adam: AdamConfig { lr: 0.02, clip: None, warmup_steps: 0, ..AdamConfig::default() },
        objective: ObjectiveConfig::new(KdObjective::Forward, Lambda::new(0.0)?),
        alpha: None,
    };
    println!("before: max TV {:.4}", max_tv(&conditionals(&student, v), &want));
    let roles = FrozenRoles { teacher_ft: Some(TeacherHandle::Local(teacher)), ..FrozenRoles::default() };
    let log = run_stage(&mut student, &data, &spec, &roles, None)?;
    println!("after {} steps: max TV {:.2e}, kd_term {:.2e}", log.len(), max_tv(&conditionals(&student, v), &want), log.last().unwrap().loss.kd_term);

    // counting estimate from sampled bigrams approaches the same table
    let mut corpus = Vec::new();
    for _ in 0..2000 {
        let mut s = vec![rng.random_range(0..v as TokenId)];
        for _ in 0..50 {
            let p = &want[*s.last().unwrap() as usize];
            let (mut u, mut next) = (rng.random::<f64>(), 0);
            while next + 1 < v && u > p[next] {
                u -= p[next];
                next += 1;
            }
            s.push(next as TokenId);
        }
        corpus.push(s);
    }
    let counted = LanguageModel::Bigram(fit_tabular(v, &corpus)?);
    println!("counted from 100k bigrams: max TV {:.3}", max_tv(&conditionals(&counted, v), &want));
    Ok(())
}
