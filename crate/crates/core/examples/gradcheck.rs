//! Finite-difference check of every analytic gradient of a fresh model.

use datlab::data::{gen_corpus, CorpusSpec};
use datlab::eval::{grad_check, grad_check_batch};
use datlab::model::{DatModel, HyperParams};

fn main() -> datlab::Result<()> {
    let corpus = gen_corpus(&CorpusSpec { utterances_per_domain: 10, ..CorpusSpec::default() })?.no_trans();
    for lambda in [-0.03, 0.0, 0.03] {
        let model = DatModel::build(&HyperParams { lambda, ..HyperParams::default() })?;
        let examples = model.prepare(&corpus.frames)?;
        let batch = grad_check_batch(&model, &examples, 4)?;
        let r = grad_check(&model, &batch, 1e-5)?;
        let cells: Vec<String> = batch
            .iter()
            .map(|f| format!("{:?}/{}/{}", f.domain, if f.vad { "speech" } else { "silence" }, f.is_labeled()))
            .collect();
        println!(
            "λ={lambda:<5} {} parameters, batch {}, max relative error {:.2e} at {:?}",
            r.checked,
            batch.len(),
            r.max_rel_err,
            r.worst.unwrap()
        );
        println!("        frames: {}", cells.join(" "));
    }
    Ok(())
}
