//! Loading an experiment from key=value text with command-line style overrides.

use datlab::config::{ExperimentConfig, KEYS};

fn main() -> datlab::Result<()> {
    let mut cfg = ExperimentConfig::parse(
        "corpus.shift = 3,0,0,0,0,0,0,0\n\
         corpus.rotation = 0\n\
         hp.lambda = 0.1\n\
         hp.feature_widths = 32,32\n\
         hp.tap = 1\n",
    )?;
    cfg.set_pair("hp.epochs=5")?;

    let spec = cfg.corpus_spec()?;
    let hp = cfg.hyper_params()?;
    println!("shift {:?}, rotation {}", spec.shift, spec.rotation);
    println!("λ={} epochs={} generator {:?} tap {}", hp.lambda, hp.epochs, hp.arch.feature_widths, hp.arch.tap);

    if let Err(e) = cfg.set_pair("hp.lamda=0.1") {
        println!("rejected: {e}");
    }
    println!("{} keys accepted", KEYS.len());
    Ok(())
}
