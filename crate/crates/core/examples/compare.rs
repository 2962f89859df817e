//! A small scenario × λ × seed matrix, printed as the report CSV.
//!
//! DATLAB_THREADS=2 cargo run --example compare

use datlab::compare::{run_compare, threads_from_env, CompareConfig};
use datlab::config::ExperimentConfig;
use datlab::train::Scenario;

fn main() -> datlab::Result<()> {
    let cfg = ExperimentConfig::parse(
        "# a quicker variant of the default benchmark\n\
         corpus.utterances = 50\n\
         hp.epochs = 15\n",
    )?;
    let report = run_compare(&CompareConfig {
        corpus: cfg.corpus_spec()?,
        hp: cfg.hyper_params()?,
        scenarios: vec![Scenario::NoTrans, Scenario::AsrTrans],
        lambdas: vec![0.0, 0.03, -0.03],
        seeds: 3,
        probe: false,
        threads: threads_from_env()?,
    })?;
    print!("{}", report.to_csv());
    Ok(())
}
