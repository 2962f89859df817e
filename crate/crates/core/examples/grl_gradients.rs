//! The gradient reversal layer and the gradients it produces.

use datlab::data::{gen_corpus, CorpusSpec};
use datlab::layers::GrlLayer;
use datlab::model::{DatModel, Group, HyperParams, Mode};
use datlab::numeric::Matrix;

fn main() -> datlab::Result<()> {
    let g = Matrix::from_rows(&[vec![2.0, -1.0]]);
    for lambda in [0.03, 0.0, -0.03] {
        let grl = GrlLayer::new(lambda);
        println!(
            "λ={lambda:<5} {:?}: forward {:?}, backward {:?}",
            Mode::of(lambda),
            grl.forward(&g).row(0),
            grl.backward(&g).row(0)
        );
    }

    // Backprop through the reversal layer equals task − λ·domain computed separately.
    let hp = HyperParams { lambda: 0.03, ..HyperParams::default() };
    let corpus = gen_corpus(&CorpusSpec { utterances_per_domain: 4, ..CorpusSpec::default() })?.no_trans();
    let mut model = DatModel::build(&hp)?;
    let batch: Vec<_> = model.prepare(&corpus.frames)?.into_iter().step_by(3).take(32).collect();

    model.forward(&batch)?;
    let through_grl = model.backward(&batch)?.flatten(Group::Feature);
    let explicit = model.weighted_loss_gradients(&batch, 1.0, -hp.lambda)?.flatten(Group::Feature);
    let worst = through_grl
        .iter()
        .zip(&explicit)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-300))
        .fold(0.0, f64::max);
    println!("θ_f: {} entries, max relative difference {worst:.1e}", through_grl.len());

    let o = model.objective(&batch)?;
    println!("E={:.4} Ly={:.4} Ld={:.4}", o.e, o.ly_mean, o.ld_mean);
    Ok(())
}
