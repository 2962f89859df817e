//! The three transcription scenarios for the target domain: none, labels
//! decoded by a baseline model, and true labels.

use datlab::data::{gen_corpus, CorpusSpec, Split};
use datlab::eval::evaluate;
use datlab::model::HyperParams;
use datlab::train::{scenario_view, train_model, Scenario};

fn main() -> datlab::Result<()> {
    let spec = CorpusSpec::default();
    let train = gen_corpus(&spec)?;
    let test = gen_corpus(&spec.with_split(Split::Test))?;
    let hp = |lambda| HyperParams { lambda, ..HyperParams::default() };

    let (baseline, _) = train_model(&hp(0.0), &train.no_trans(), 100)?;

    for scenario in Scenario::ALL {
        let view = scenario_view(&train, scenario, Some(&baseline))?;
        for lambda in [0.0, 0.03] {
            let (model, _) = train_model(&hp(lambda), &view, 100)?;
            let fer = evaluate(&model, &test)?.fer_target.unwrap();
            println!("{:<12} λ={lambda:<5} target FER {fer:.4}", scenario.name());
        }
    }
    Ok(())
}
