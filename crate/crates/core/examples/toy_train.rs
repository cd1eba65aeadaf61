//! Trains on the synthetic toy corpus and reports metrics per epoch.

use std::ops::ControlFlow;
use std::time::Instant;

use tabret_core::eval::{evaluate, Bm25Index, GainKind, RunFile};
use tabret_core::model::{Model, ModelConfig, PreparedCorpus, PreparedQuery};
use tabret_core::toy::{generate, ToyConfig};
use tabret_core::training::{train, Objective, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(20, |a| a.parse().unwrap());
    let batch: usize = args.get(2).map_or(16, |a| a.parse().unwrap());
    let warmup: usize = args.get(3).map_or(100, |a| a.parse().unwrap());
    let data = generate(&ToyConfig::default());
    let tables = PreparedCorpus::prepare(&data.corpus, &data.embeddings).unwrap();
    let queries: Vec<PreparedQuery> = data.instances.iter().map(|i| PreparedQuery::new(&i.query_text, &data.embeddings)).collect();
    let bm25 = Bm25Index::from_corpus(&data.corpus);
    let run: RunFile = data.instances.iter().map(|i| (i.query_id.clone(), bm25.rank(&i.query_text, None))).collect();
    let r = evaluate(&run, &data.instances, GainKind::Exponential);
    println!("bm25 map {:.4} p1 {:.4}", r.map, r.p_at_1);
    let mut model = Model::new(ModelConfig::default(), 1).unwrap();
    let config = TrainConfig { objective: Objective::Nll, epochs, batch_size: batch, warmup_steps: warmup, seed: 1, ..TrainConfig::default() };
    let start = Instant::now();
    let refs: Vec<_> = tables.tables.iter().collect();
    train(&mut model, &data.instances, &queries, &tables, &config, |_| {}, |e, m| {
        if e % 5 == 0 || e == 1 {
            let enc = m.encode_tables(&refs).unwrap();
            let run: RunFile = data.instances.iter().zip(&queries).map(|(i, q)| (i.query_id.clone(), m.rank(q, &refs, &enc, None).unwrap())).collect();
            let r = evaluate(&run, &data.instances, GainKind::Exponential);
            println!("epoch {e} {:.1}s map {:.4} p1 {:.4}", start.elapsed().as_secs_f64(), r.map, r.p_at_1);
        }
        Ok(ControlFlow::Continue(()))
    }).map(|rep| println!("losses {:?}", rep.epoch_losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>())).unwrap();
}
