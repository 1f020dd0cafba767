use cellsearch::attention::{Activation, AttentionDimension, AttentionOpSpec, AttentionType, KvSource};
use cellsearch::cell::{CellDims, CellSpec};
use cellsearch::checks::max_normalization_error;
use cellsearch::harness::train::snapshot;
use cellsearch::harness::{
    evaluate, generate_dataset, train, BackboneConfig, Block, InsertionPoint, Network, TaskConfig, TrainConfig,
};
use cellsearch::supergraph::{search_step, Preset, SharingMode, SupergraphBlock, SupergraphConfig};
use cellsearch::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> CellDims {
    CellDims {
        c_reduction: 4,
        c_op: 2,
        t_group: 16,
        h_resize: 2,
        w_resize: 2,
    }
}

fn cell_net() -> Network {
    let ops = vec![
        AttentionOpSpec::new(
            AttentionDimension::Temporal,
            AttentionType::DotProduct,
            Activation::Softmax,
            false,
            [0],
            2,
            2,
        ),
        AttentionOpSpec::new(
            AttentionDimension::Spatial,
            AttentionType::MapBased,
            Activation::Sigmoid,
            true,
            [0, 1],
            2,
            2,
        ),
    ];
    Network::with_cell(
        BackboneConfig::default(),
        CellSpec::new(ops, KvSource::CellInput, dims()),
        &InsertionPoint::ALL,
    )
}

fn short(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch: 8,
        lr,
        warmup_steps: 1,
        eval_batch: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_and_accuracy_unchanged() {
    let data = generate_dataset(&TaskConfig::default(), 16, 8, 1).unwrap();
    let net = cell_net();
    let mut store: ParamStore<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let before = snapshot(&store);
    let init_eval = evaluate(&net, &store, &data.val, 16).unwrap();
    let rows = train(&net, &mut store, &data.train, Some(&data.val), &short(0.0), &mut |_| Ok(())).unwrap();
    assert_eq!(snapshot(&store), before);
    let val = rows.iter().find(|r| r.split == "val").unwrap();
    assert_eq!(val.top1, init_eval.top1);
    assert_eq!(val.loss, init_eval.loss);
}

#[test]
fn same_seed_gives_identical_metric_logs() {
    let data = generate_dataset(&TaskConfig::default(), 16, 8, 3).unwrap();
    let net = cell_net();
    let run = || {
        let mut store: ParamStore<f32> = net.init(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let rows = train(&net, &mut store, &data.train, Some(&data.val), &short(0.003), &mut |_| Ok(())).unwrap();
        (rows, snapshot(&store))
    };
    assert_eq!(run(), run());
}

#[test]
fn every_distribution_stays_normalized_while_searching() {
    let data = generate_dataset(&TaskConfig::default(), 8, 4, 5).unwrap();
    let mut cfg = SupergraphConfig::preset(Preset::Sg1, dims());
    cfg.c_prime = 2;
    let block = SupergraphBlock::new(cfg, SharingMode::PositionSpecific);
    let net = Network {
        backbone: BackboneConfig::default(),
        blocks: InsertionPoint::ALL.iter().map(|&p| (p, Block::Supergraph(block.clone()))).collect(),
    };
    let mut store: ParamStore<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let tc = short(0.01);
    let mut opt = tc.build_optimizer::<f64>().unwrap();
    for step in 0..3 {
        let idx: Vec<usize> = (0..4).map(|i| (i + step * 4) % 8).collect();
        let (x, labels) = data.train.batch::<f64>(&idx).unwrap();
        let (_, dists) = search_step(&net, &mut store, opt.as_mut(), x, &labels, 0.01).unwrap();
        assert!(dists.iter().any(|(n, _)| n.ends_with("sink_logits")));
        assert!(dists.iter().any(|(n, _)| n.ends_with("softmax_rows")));
        assert!(max_normalization_error(&dists) <= 1e-10);
    }
    assert!(search_step(&cell_net(), &mut store, opt.as_mut(), data.train.batch(&[0]).unwrap().0, &[0], 0.0).is_err());
}
