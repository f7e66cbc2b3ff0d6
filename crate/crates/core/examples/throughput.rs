//! Forward/backward throughput of the LSTM and MLP classifiers.

use std::time::Instant;

use seqcl::autodiff::Graph;
use seqcl::data::SequenceBatch;
use seqcl::models::{Classifier, HeadMode, ModelConfig, ModelKind};

fn main() {
    let hidden: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let rows = 32;
    for (kind, chunk) in [(ModelKind::Mlp, 784), (ModelKind::Lstm, 28), (ModelKind::Lstm, 16), (ModelKind::Lstm, 4)] {
        let cfg = ModelConfig {
            kind,
            input_size: chunk,
            hidden_size: hidden,
            num_layers: 1,
            head_mode: HeadMode::Single,
            num_classes_total: 10,
        };
        let model = Classifier::new(cfg, 0).unwrap();
        let seqs: Vec<Vec<f64>> = (0..rows).map(|r| (0..784).map(|i| ((i * 7 + r) % 13) as f64 / 13.0).collect()).collect();
        let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = SequenceBatch::pack(&refs, (0..rows).map(|r| r % 10).collect(), chunk, 0.0);
        let reps = 10;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let logits = model.forward(&mut g, &vars, &batch, None).unwrap();
            let loss = g.cross_entropy(logits, &batch.targets, None).unwrap();
            let _ = g.backward(loss).unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / (reps * rows) as f64;
        let t1 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let _ = model.forward(&mut g, &vars, &batch, None).unwrap();
        }
        println!("  forward only {:.1} us/sample", t1.elapsed().as_secs_f64() / (reps * rows) as f64 * 1e6);
        println!("{kind:?} chunk {chunk}: {:.1} us/sample", per * 1e6);
    }
}
