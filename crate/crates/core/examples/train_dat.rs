//! Trains a source-only baseline, an adversarial model and a multi-task model
//! on the same data and compares them on the held-out split.

use datlab::checkpoint;
use datlab::data::{gen_corpus, CorpusSpec, Split};
use datlab::eval::{evaluate, relative_reduction};
use datlab::model::HyperParams;
use datlab::train::train_model;

fn main() -> datlab::Result<()> {
    let spec = CorpusSpec::default();
    let train = gen_corpus(&spec)?.no_trans();
    let test = gen_corpus(&spec.with_split(Split::Test))?;

    let mut base_fer = None;
    for lambda in [0.0, 0.03, -0.03] {
        let hp = HyperParams { lambda, ..HyperParams::default() };
        let (model, log) = train_model(&hp, &train, 50)?;
        let m = evaluate(&model, &test)?;
        let fer = m.fer_target.unwrap();
        let base = *base_fer.get_or_insert(fer);
        println!(
            "λ={lambda:<5} source FER {:.4}  target FER {fer:.4}  reduction {:.1}%  domain acc {:.3}",
            m.fer_source.unwrap(),
            relative_reduction(base, fer)?,
            m.domain_acc
        );
        if let Some(last) = log.rows.last() {
            println!("        last logged batch: E={:.4} Ly={:.4} Ld={:.4}", last.e, last.ly, last.ld);
        }

        let bytes = checkpoint::encode(&model, &hp);
        let (restored, _) = checkpoint::decode(&bytes)?;
        assert_eq!(evaluate(&restored, &test)?, m);
    }
    Ok(())
}
