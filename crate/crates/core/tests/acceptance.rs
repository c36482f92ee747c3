//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Trained models are cached and shared between criteria. A criterion's
//! reported time includes the training time of every model it uses.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ponder_core::benchdata::{generate, Dataset, SplitSizes, Task, TaskSpec};
use ponder_core::exitpolicy::{evaluate, replay, run_policy, ExitPolicy, Step, StreamingRule, TraceSet};
use ponder_core::grad::grad_check;
use ponder_core::haltdist::{geometric_prior, kl_truncated, ExitDistribution, TruncationIndex};
use ponder_core::harness::{read_outcomes_csv, RunConfig};
use ponder_core::model::{step_cell_calls, Checkpoint, ClassifierMode, ModelConfig, ParamStore, PonderModel};
use ponder_core::rng::RngStream;
use ponder_core::stats::{chi_square_gof, mean, variance};
use ponder_core::training::{ponder_loss, train, Objective, PonderObjective, TrainConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn pattern_task() -> TaskSpec {
    TaskSpec {
        task: Task::PatternDepth,
        vocab_size: 11,
        seq_len: 9,
        num_classes: 2,
        difficulty_levels: 4,
        examples_per_split: SplitSizes {
            train: 2048,
            dev: 256,
            test: 256,
        },
        seed: 17,
    }
}

fn small_task() -> TaskSpec {
    TaskSpec {
        examples_per_split: SplitSizes {
            train: 512,
            dev: 128,
            test: 256,
        },
        seed: 23,
        ..pattern_task()
    }
}

fn model_config(mode: ClassifierMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_seq_len: 9,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_layers: 12,
        num_classes: 2,
        classifier_mode: mode,
        ..ModelConfig::default()
    }
}

fn train_config(seed: u64, lambda_prior: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        lambda_learning_rate: 9e-3,
        batch_size: 32,
        lambda_prior,
        patience_epochs: 5,
        max_epochs: 30,
        seed,
        ..TrainConfig::default()
    }
}

fn small_train_config(seed: u64, lambda_prior: f64) -> TrainConfig {
    TrainConfig {
        max_epochs: 12,
        ..train_config(seed, lambda_prior)
    }
}

struct Trained {
    model: PonderModel,
    params: ParamStore,
    secs: f64,
}

#[derive(Hash, PartialEq, Eq, Clone, Copy)]
enum Key {
    /// Full pattern_depth run: seed.
    Pattern(u64),
    /// Small pattern_depth run: seed and prior in thousandths.
    Small(u64, u64),
    SmallPabee,
}

struct Cache {
    pattern: Dataset,
    small: Dataset,
    models: HashMap<Key, Trained>,
}

impl Cache {
    fn new() -> Self {
        Self {
            pattern: generate(&pattern_task()).expect("pattern task"),
            small: generate(&small_task()).expect("small task"),
            models: HashMap::new(),
        }
    }

    /// Trains on first use. Returns the model and its training time.
    fn get(&mut self, key: Key) -> &Trained {
        if !self.models.contains_key(&key) {
            let (mcfg, tcfg, data) = match key {
                Key::Pattern(s) => (model_config(ClassifierMode::Shared), train_config(s, 0.1), &self.pattern),
                Key::Small(s, l) => (
                    model_config(ClassifierMode::Shared),
                    small_train_config(s, l as f64 / 1000.0),
                    &self.small,
                ),
                Key::SmallPabee => (
                    model_config(ClassifierMode::PerLayer),
                    TrainConfig {
                        objective: Objective::Pabee,
                        ..small_train_config(0, 0.1)
                    },
                    &self.small,
                ),
            };
            let start = Instant::now();
            let r = train(&mcfg, &tcfg, &data.train, &data.dev).expect("training");
            let trained = Trained {
                model: PonderModel::new(r.model).expect("model"),
                params: r.params,
                secs: start.elapsed().as_secs_f64(),
            };
            self.models.insert(key, trained);
        }
        &self.models[&key]
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    /// Training time of the models this criterion used.
    train_secs: f64,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        train_secs: 0.0,
    }
}

fn c01_prior_normalization(_: &mut Cache) -> Outcome {
    let p = geometric_prior(0.1, 12).unwrap();
    let sum_err = (p.probs().iter().sum::<f64>() - 1.0).abs();
    let last_err = (p.probs()[11] - 0.9f64.powi(11)).abs();
    outcome(
        sum_err <= 1e-12 && last_err <= 1e-12,
        format!("|sum-1|={sum_err:.1e} |p12-0.9^11|={last_err:.1e}"),
    )
}

fn c02_kl_hand_case(_: &mut Cache) -> Outcome {
    let p = ExitDistribution::new(vec![0.6, 0.4]).unwrap();
    let q = ExitDistribution::new(vec![0.1, 0.9]).unwrap();
    let kl = kl_truncated(&p, &q, TruncationIndex::new(2)).unwrap();
    let err = (kl - 0.75068).abs();
    outcome(err <= 1e-5, format!("kl={kl:.8} nats, |err|={err:.1e}"))
}

fn c03_gradient_fidelity(_: &mut Cache) -> Outcome {
    let m = PonderModel::new(ModelConfig {
        vocab_size: 10,
        max_seq_len: 6,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_layers: 4,
        num_classes: 3,
        init_seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let p = m.init_params();
    let batch: [&[usize]; 3] = [&[0, 4, 2, 9, 1, 6], &[0, 1, 1, 7, 3, 3], &[0, 8, 5, 2, 2, 9]];
    let targets = [2, 0, 1];
    let obj = PonderObjective::new(0.5, geometric_prior(0.1, 4).unwrap(), Default::default());
    // Dropout is frozen by drawing the same masks on every evaluation.
    let report = grad_check(
        |g, vars| {
            let bound = p.bind_vars(vars)?;
            let mut rng = RngStream::new(0);
            let layers = m.forward_batch(g, &bound, &batch, &mut rng)?;
            Ok(ponder_loss(g, &layers, &targets, &obj)?.loss)
        },
        p.arrays(),
        1e-5,
        1e-4,
    )
    .unwrap();
    let worst = report.max_rel_err();
    outcome(
        worst < 1e-4,
        format!("max rel err {worst:.2e} over {} parameter tensors", report.params.len()),
    )
}

fn outcomes_csv(summary: &ponder_core::exitpolicy::EvalSummary) -> Vec<u8> {
    let mut buf = Vec::new();
    ponder_core::harness::write_outcomes_csv(&mut buf, &summary.outcomes).unwrap();
    buf
}

fn c04_q_exit_determinism(cache: &mut Cache) -> Outcome {
    let inputs = cache.small.test.clone();
    let t = cache.get(Key::Small(0, 100));
    let secs = t.secs;
    let first = evaluate(&t.model, &t.params, &inputs, ExitPolicy::QExit(0.5)).unwrap();
    let reference = outcomes_csv(&first);
    let mut identical = true;
    let mut per_example: Vec<Vec<f64>> = vec![Vec::new(); inputs.len()];
    for _ in 0..100 {
        let s = evaluate(&t.model, &t.params, &inputs, ExitPolicy::QExit(0.5)).unwrap();
        identical &= outcomes_csv(&s) == reference;
        for (v, o) in per_example.iter_mut().zip(&s.outcomes) {
            v.push(o.exit_layer as f64);
        }
    }
    let max_var = per_example.iter().map(|v| variance(v)).fold(0.0, f64::max);
    Outcome {
        pass: identical && max_var == 0.0 && inputs.len() == 256,
        detail: format!("{} inputs x 100 runs, max exit-layer variance {max_var}, CSVs identical: {identical}", inputs.len()),
        train_secs: secs,
    }
}

fn c05_sampling_fidelity(cache: &mut Cache) -> Outcome {
    let inputs: Vec<_> = cache.small.dev[..10].to_vec();
    let t = cache.get(Key::Small(0, 100));
    let secs = t.secs;
    let mut worst_p = 1.0f64;
    let mut all = true;
    for ex in &inputs {
        let trace = t.model.forward_full(&t.params, &ex.tokens).unwrap();
        let post = trace.posterior().unwrap();
        let mut counts = vec![0usize; trace.len()];
        for k in 0..20_000u64 {
            counts[replay(&trace.layers, ExitPolicy::Sample(2024), k).unwrap().exit_layer - 1] += 1;
        }
        let gof = chi_square_gof(&counts, post.probs());
        worst_p = worst_p.min(gof.p_value);
        all &= gof.passes(0.001);
    }
    Outcome {
        pass: all,
        detail: format!("10 traces x 20000 samples, smallest p-value {worst_p:.4}"),
        train_secs: secs,
    }
}

fn c06_streaming_offline(_: &mut Cache) -> Outcome {
    let mut rng = RngStream::new(6);
    let n = 12;
    let (mut agree, mut total) = (0, 0);
    for _ in 0..1000 {
        let lambdas: Vec<f64> = (0..n)
            .map(|_| match rng.below(10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.uniform(),
            })
            .collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let q = 0.01 + 0.99 * rng.uniform();
        let t = 1 + rng.below(n);

        // Offline: full CDF, then the first crossing.
        let mut cdf = 0.0;
        let mut survival = 1.0;
        let mut q_offline = n;
        for (i, &l) in lambdas.iter().enumerate() {
            cdf += if i + 1 == n { survival } else { l * survival };
            survival *= 1.0 - l;
            if cdf >= q {
                q_offline = i + 1;
                break;
            }
        }
        let p_offline = (t..=n)
            .find(|&i| preds[i - t..i].iter().all(|&c| c == preds[i - 1]))
            .unwrap_or(n);

        let stream = |policy: ExitPolicy| {
            let mut rule = StreamingRule::new(policy, 0).unwrap();
            (1..=n)
                .find(|&i| {
                    let mut logits = vec![0.0; 2];
                    logits[preds[i - 1]] = 1.0;
                    rule.observe_parts(i, n, lambdas[i - 1], &logits) == Step::Exit
                })
                .unwrap()
        };
        total += 2;
        agree += (stream(ExitPolicy::QExit(q)) == q_offline) as usize;
        agree += (stream(ExitPolicy::Patience(t)) == p_offline) as usize;
    }
    outcome(agree == total, format!("{agree}/{total} decisions agree"))
}

fn c07_threshold_monotonicity(cache: &mut Cache) -> Outcome {
    let dev = cache.small.dev.clone();
    let t = cache.get(Key::Small(0, 100));
    let secs = t.secs;
    let traces = TraceSet::compute(&t.model, &t.params, &dev).unwrap();
    let depths: Vec<f64> = [0.05, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .map(|&q| traces.evaluate(ExitPolicy::QExit(q)).unwrap().mean_exit_depth())
        .collect();
    let violations = depths.windows(2).filter(|w| w[1] < w[0]).count();
    Outcome {
        pass: violations == 0,
        detail: format!("dev depths {depths:.3?}, {violations} violations"),
        train_secs: secs,
    }
}

fn pattern_traces(cache: &mut Cache) -> (Vec<TraceSet>, f64) {
    let test = cache.pattern.test.clone();
    let mut secs = 0.0;
    let traces = SEEDS
        .iter()
        .map(|&s| {
            let t = cache.get(Key::Pattern(s));
            secs += t.secs;
            TraceSet::compute(&t.model, &t.params, &test).unwrap()
        })
        .collect();
    (traces, secs)
}

fn c08_table_direction(cache: &mut Cache) -> Outcome {
    let (traces, secs) = pattern_traces(cache);
    let (mut q, mut s, mut e) = (Vec::new(), Vec::new(), Vec::new());
    for (ts, &seed) in traces.iter().zip(&SEEDS) {
        q.push(ts.evaluate(ExitPolicy::QExit(0.5)).unwrap().accuracy());
        s.push(ts.evaluate(ExitPolicy::Sample(seed)).unwrap().accuracy());
        e.push(ts.evaluate(ExitPolicy::Expectation).unwrap().accuracy());
    }
    let closer = (0..SEEDS.len()).filter(|&k| (q[k] - e[k]).abs() <= (s[k] - e[k]).abs()).count();
    Outcome {
        pass: mean(&q) >= mean(&s) && closer >= 4,
        detail: format!(
            "acc q_exit {:.4} sample {:.4} expectation {:.4}; q_exit closer to expectation in {closer}/5 seeds",
            mean(&q),
            mean(&s),
            mean(&e)
        ),
        train_secs: secs,
    }
}

fn c09_prior_sweep(cache: &mut Cache) -> Outcome {
    let test = cache.small.test.clone();
    let mut secs = 0.0;
    let mut depths = Vec::new();
    for prior in [100, 250, 500] {
        let per_seed: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let t = cache.get(Key::Small(s, prior));
                secs += t.secs;
                evaluate(&t.model, &t.params, &test, ExitPolicy::QExit(0.5))
                    .unwrap()
                    .mean_exit_depth()
            })
            .collect();
        depths.push(mean(&per_seed));
    }
    Outcome {
        pass: depths[0] > depths[1] && depths[1] > depths[2],
        detail: format!("mean exit depth at lambda 0.1/0.25/0.5: {depths:.3?}"),
        train_secs: secs,
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ponder")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn summary_field(path: &Path, column: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == column).unwrap();
    row[k].parse().unwrap()
}

fn c10_speed_report(cache: &mut Cache) -> Outcome {
    let secs = cache.get(Key::Small(0, 100)).secs + cache.get(Key::SmallPabee).secs;
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = RunConfig {
        task: small_task(),
        model: model_config(ClassifierMode::Shared),
        train: small_train_config(0, 0.1),
        ..RunConfig::default()
    };
    fs::write(d.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    for (key, name) in [(Key::Small(0, 100), "ponder.json"), (Key::SmallPabee, "pabee.json")] {
        let t = cache.get(key);
        Checkpoint::new(t.model.config().clone(), t.params.clone()).save(&d.join(name)).unwrap();
    }
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (config, data) = (s(&d.join("config.json")), s(&d.join("run/data")));
    let mut notes = String::new();
    let mut pass = cli(&["gen-data", "--config", &config, "--out", &s(&d.join("run"))]).is_ok();

    let mut eval = |ck: &str, policy: &str| -> Option<(f64, f64, f64)> {
        let out = s(&d.join(format!("eval-{policy}")));
        let args = [
            "eval", "--config", &config, "--data", &data, "--out", &out, "--checkpoint", ck, "--policy", policy,
        ];
        if let Err(e) = cli(&args) {
            let _ = write!(notes, "eval {policy} failed: {e}");
            return None;
        }
        let out = Path::new(&out);
        let rows = read_outcomes_csv(fs::File::open(out.join("outcomes.csv")).unwrap()).unwrap();
        let mean_depth = rows.iter().map(|r| r.layers_evaluated).sum::<usize>() as f64 / rows.len() as f64;
        let recomputed = 12.0 / mean_depth;
        let reported = summary_field(&out.join("summary.csv"), "speedup");
        let depth = summary_field(&out.join("summary.csv"), "mean_exit_depth");
        (depth == mean_depth).then_some((recomputed, reported, depth))
    };
    let q = eval(&s(&d.join("ponder.json")), "q_exit:0.5");
    let p = eval(&s(&d.join("pabee.json")), "patience:11");
    match (q, p) {
        (Some((qr, qs, qd)), Some((pr, ps, pd))) => {
            pass &= qr == qs && pr == ps && ps < 1.1;
            let _ = write!(
                notes,
                "q_exit:0.5 speedup {qs:.4} (depth {qd:.3}, recomputed equal: {}); patience:11 speedup {ps:.4} (depth {pd:.3}, recomputed equal: {})",
                qr == qs,
                pr == ps
            );
        }
        _ => pass = false,
    }
    Outcome {
        pass,
        detail: notes,
        train_secs: secs,
    }
}

fn c11_lazy_evaluation(cache: &mut Cache) -> Outcome {
    let inputs: Vec<_> = cache.small.train[..500].to_vec();
    let secs = cache.get(Key::Small(0, 100)).secs + cache.get(Key::SmallPabee).secs;
    let policies: Vec<ExitPolicy> = ["q_exit:0.5", "q_exit:0.9", "sample:11", "patience:6", "entropy:0.2", "fixed:5", "expectation"]
        .iter()
        .map(|p| p.parse().unwrap())
        .collect();
    let (mut checked, mut bad) = (0, 0);
    for key in [Key::Small(0, 100), Key::SmallPabee] {
        let t = &cache.models[&key];
        let n = t.model.depth();
        for (k, ex) in inputs.iter().enumerate() {
            for &policy in &policies {
                let before = step_cell_calls();
                let d = run_policy(&t.model, &t.params, &ex.tokens, policy, k as u64).unwrap();
                let calls = (step_cell_calls() - before) as usize;
                let want = if policy.is_early_exit() { d.exit_layer } else { n };
                checked += 1;
                if calls != want || d.layers_evaluated != calls {
                    bad += 1;
                }
            }
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("{checked} runs over {} inputs, {bad} count mismatches", inputs.len()),
        train_secs: secs,
    }
}

fn c12_adaptive_depth(cache: &mut Cache) -> Outcome {
    let (traces, secs) = pattern_traces(cache);
    let per_seed: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.evaluate(ExitPolicy::QExit(0.5)).unwrap().depth_by_difficulty())
        .collect();
    let levels = per_seed[0].len();
    let avg: Vec<f64> = (0..levels)
        .map(|d| mean(&per_seed.iter().map(|v| v[d]).collect::<Vec<_>>()))
        .collect();
    let acc: Vec<f64> = traces
        .iter()
        .map(|t| t.evaluate(ExitPolicy::QExit(0.5)).unwrap().accuracy())
        .collect();
    Outcome {
        pass: avg.windows(2).all(|w| w[0] <= w[1]),
        detail: format!(
            "depth by difficulty (5-seed mean) {avg:.3?}; per seed {per_seed:.2?}; q_exit acc {:.4}",
            mean(&acc)
        ),
        train_secs: secs,
    }
}

type Criterion = (&'static str, Duration, fn(&mut Cache) -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("prior normalization", Duration::from_secs(1), c01_prior_normalization),
        ("KL hand case", Duration::from_secs(1), c02_kl_hand_case),
        ("gradient fidelity", Duration::from_secs(120), c03_gradient_fidelity),
        ("Q-exit determinism", Duration::from_secs(120), c04_q_exit_determinism),
        ("sampling fidelity", Duration::from_secs(60), c05_sampling_fidelity),
        ("streaming/offline equivalence", Duration::from_secs(60), c06_streaming_offline),
        ("threshold monotonicity", Duration::from_secs(300), c07_threshold_monotonicity),
        ("ablation direction", Duration::from_secs(1200), c08_table_direction),
        ("prior-sweep direction", Duration::from_secs(1500), c09_prior_sweep),
        ("speed-report consistency", Duration::from_secs(600), c10_speed_report),
        ("lazy evaluation", Duration::from_secs(120), c11_lazy_evaluation),
        ("adaptive depth by difficulty", Duration::from_secs(1200), c12_adaptive_depth),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut cache = Cache::new();
    let mut failed = 0;
    for (k, (name, budget, run)) in criteria.iter().enumerate() {
        let id = format!("{:02}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let trained_before: f64 = cache.models.values().map(|t| t.secs).sum();
        let start = Instant::now();
        let out = run(&mut cache);
        let trained_now: f64 = cache.models.values().map(|t| t.secs).sum::<f64>() - trained_before;
        // Own work plus training of cached models trained by earlier criteria.
        let secs = start.elapsed().as_secs_f64() - trained_now + out.train_secs;
        let in_budget = secs < budget.as_secs_f64();
        let pass = out.pass && in_budget;
        failed += !pass as usize;
        println!(
            "{} criterion {id} {name}: {} [{secs:.1}s of {}s budget{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
