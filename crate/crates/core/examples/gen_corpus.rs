//! Generates a shifted two-domain corpus and writes it with its truth sidecar.
//!
//! cargo run --example gen_corpus -- /tmp/train.datf

use datlab::data::{gen_corpus, read_corpus_with_truth, truth_path, write_corpus, write_truth, CorpusSpec};
use datlab::model::Domain;

fn main() -> datlab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "train.datf".into());
    let spec = CorpusSpec::default();
    let corpus = gen_corpus(&spec)?;

    write_corpus(&corpus, &out)?;
    write_truth(&corpus, truth_path(&out))?;

    let c = corpus.counts();
    for domain in [Domain::Source, Domain::Target] {
        println!(
            "{domain:?}: speech labeled {}, speech unlabeled {}, silence {}",
            c.get(domain, true, true),
            c.get(domain, true, false),
            c.get(domain, false, false)
        );
    }

    let back = read_corpus_with_truth(&out, truth_path(&out))?;
    assert_eq!(back, corpus);
    println!("wrote {} frames to {out}", corpus.len());
    Ok(())
}
