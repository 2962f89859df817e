//! Measures how much domain information the tapped features still carry.
//! A probe accuracy near 0.5 means the domains are indistinguishable.

use datlab::data::{gen_corpus, CorpusSpec, Split};
use datlab::eval::{probe_invariance, ProbeConfig};
use datlab::model::HyperParams;
use datlab::train::train_model;

fn main() -> datlab::Result<()> {
    let spec = CorpusSpec::default();
    let train = gen_corpus(&spec)?.no_trans();
    let test = gen_corpus(&spec.with_split(Split::Test))?;
    let cfg = ProbeConfig::default();

    for lambda in [0.0, 0.03, 0.3] {
        let (model, _) = train_model(&HyperParams { lambda, ..HyperParams::default() }, &train, 100)?;
        println!("λ={lambda:<5} probe accuracy {:.3}", probe_invariance(&model, &test, &cfg)?);
    }
    Ok(())
}
