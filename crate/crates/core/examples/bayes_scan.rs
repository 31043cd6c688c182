//! Prints Bayes accuracies of the synthetic corpus over a grid of block
//! sizes and argument signal strengths.

use advimit::corpus::{bayes_accuracy_args_only, bayes_accuracy_with_connective, CorpusSpec};

fn main() {
    for block_size in [4usize, 6, 10, 20, 66] {
        for arg_signal in [0.03, 0.05, 0.08, 0.1, 0.15] {
            let spec = CorpusSpec {
                block_size,
                arg_signal,
                ..Default::default()
            };
            let a = bayes_accuracy_args_only(&spec, 100_000, 1).unwrap();
            let c = bayes_accuracy_with_connective(&spec, 100_000, 1).unwrap();
            println!("block {block_size:3} signal {arg_signal:.2}: args {a:.3} with connective {c:.3}");
        }
    }
}
