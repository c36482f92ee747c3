use ponder_core::benchdata::{generate, SplitSizes, Task, TaskSpec};
use ponder_core::model::ModelConfig;
use ponder_core::training::{run_ablation, TrainConfig, ABLATION_ROWS};

fn setup() -> (ModelConfig, TrainConfig, ponder_core::benchdata::Dataset) {
    let data = generate(&TaskSpec {
        task: Task::PatternDepth,
        vocab_size: 11,
        seq_len: 9,
        num_classes: 2,
        difficulty_levels: 4,
        examples_per_split: SplitSizes {
            train: 64,
            dev: 32,
            test: 64,
        },
        seed: 8,
    })
    .unwrap();
    let model = ModelConfig {
        vocab_size: 11,
        max_seq_len: 9,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_layers: 6,
        num_classes: 2,
        lambda_init_prior: Some(0.3),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: 5e-3,
        lambda_learning_rate: 1e-2,
        batch_size: 16,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    (model, train, data)
}

#[test]
fn ablation_table_shape_and_eval_noise() {
    let (model, train, data) = setup();
    let seeds = [3, 7];
    let table = run_ablation(&model, &train, &data, &seeds).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(names, ABLATION_ROWS);
    for r in &table.rows {
        assert_eq!(r.seeds, seeds);
        assert_eq!(r.metrics.len(), 2);
        assert!(r.metrics.iter().all(|m| (0.0..=1.0).contains(m)));
    }
    for name in ["q_exit", "q_exit+lambda_lr+3layer+concat", "ponder_expectation", "vanilla"] {
        assert_eq!(table.row(name).unwrap().mean_eval_repeat_std(), 0.0, "{name}");
    }
    assert!(table.row("ponder_sampling").unwrap().mean_eval_repeat_std() > 0.0);

    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "config,mean,std,median,eval_repeat_std,seeds");
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn ablation_is_deterministic_and_rejects_bad_input() {
    let (model, train, data) = setup();
    let a = run_ablation(&model, &train, &data, &[1]).unwrap();
    let b = run_ablation(&model, &train, &data, &[1]).unwrap();
    let metrics = |t: &ponder_core::training::AblationTable| t.rows.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>();
    assert_eq!(metrics(&a), metrics(&b));
    assert!(run_ablation(&model, &train, &data, &[]).is_err());
    let mut empty = data.clone();
    empty.test.clear();
    assert!(run_ablation(&model, &train, &empty, &[1]).is_err());
}
