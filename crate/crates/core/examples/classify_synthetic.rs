//! Generate a labelled synthetic corpus, pick λ on a validation split and
//! report held-out classification accuracy.

use nadetopic::corpus::{gen_synthetic, SyntheticSpec};
use nadetopic::{eval, trainer, Corpus, TrainConfig};

fn main() -> nadetopic::Result<()> {
    let all = gen_synthetic(&SyntheticSpec {
        classes: 4,
        k: 20,
        m: 1,
        a: 10,
        docs_per_class: 100,
        doc_len: 50,
        ann_len: 3,
        concentration: 0.05,
        seed: 11,
    })?;
    let (train, test): (Vec<_>, Vec<_>) = all.docs.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let train = Corpus::new(all.vocab.clone(), train.into_iter().map(|x| x.1).collect())?;
    let test = Corpus::new(all.vocab, test.into_iter().map(|x| x.1).collect())?;

    let config = TrainConfig {
        hidden: 16,
        learning_rate: 0.002,
        epochs: 200,
        patience: 20,
        ..TrainConfig::default()
    };
    let (params, chosen, logs) = trainer::select_lambda(&train, &config, &[0.0, 0.1, 1.0])?;
    for log in &logs {
        println!(
            "lambda {:<4} best epoch {:>3} of {:>3}, validation accuracy {:.3}",
            log.lambda,
            log.best_epoch,
            log.epochs.len(),
            log.best_score
        );
    }
    let report = eval::evaluate(&params, &test, 5)?;
    println!("chosen lambda {}: test accuracy {:.3}", chosen.lambda, report.accuracy);
    for (y, row) in report.confusion.iter().enumerate() {
        println!("  class {y}: {row:?}");
    }
    Ok(())
}
