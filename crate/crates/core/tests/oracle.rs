mod common;

use common::{max_abs_diff, OracleMlp, OracleSgd};
use tsa::data::{batches, gen_blobs, gen_spirals};
use tsa::distill::DistillConfig;
use tsa::nn::NetworkSpec;
use tsa::trainer::{epoch_seed, lr_at, train, TrainConfig};
use tsa::tree::{TreeNetwork, TreeSpec};

fn tree_flat(net: &TreeNetwork) -> Vec<f64> {
    OracleMlp::from_blocks(
        net.spec().base(),
        net.params().iter().map(|b| b.tensors().to_vec()).collect(),
    )
    .flat()
}

fn run(base: NetworkSpec, data: &tsa::data::Dataset, cfg: &TrainConfig, init_seed: u64) -> f64 {
    let spec = TreeSpec::from_branching(base.clone(), &vec![1; base.depth()]).unwrap();
    let mut net = TreeNetwork::instantiate(spec, init_seed);
    let mut oracle = OracleMlp::from_blocks(&base, net.params().iter().map(|b| b.tensors().to_vec()).collect());
    train(&mut net, data, data, cfg).unwrap();

    let mut sgd = OracleSgd::new(&oracle);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for b in batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch)) {
            sgd.step(&mut oracle, b.features.data(), &b.labels, lr, cfg.momentum, cfg.weight_decay);
        }
    }
    max_abs_diff(&tree_flat(&net), &oracle.flat())
}

#[test]
fn single_chain_matches_oracle_over_minibatch_epochs() {
    let data = gen_spirals(40, 3, 0.05, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        lr0: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
        seed: 3,
        distill: DistillConfig {
            alpha: 0.0,
            ..DistillConfig::default()
        },
        ..TrainConfig::default()
    };
    let diff = run(NetworkSpec::mlp(2, 10, 3, 3).unwrap(), &data, &cfg, 8);
    assert!(diff < 1e-10, "max parameter difference {diff:e}");
}

#[test]
fn full_batch_epochs_match_oracle() {
    let data = gen_blobs(15, 3, 4, 3.0, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 45,
        distill: DistillConfig {
            alpha: 0.0,
            ..DistillConfig::default()
        },
        ..TrainConfig::default()
    };
    let diff = run(NetworkSpec::mlp(4, 6, 2, 3).unwrap(), &data, &cfg, 0);
    assert!(diff < 1e-10, "max parameter difference {diff:e}");
}
