//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.
//!
//! Set `MOMOE_BLESS=1` to rewrite the aggregator golden files instead of
//! comparing against them.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use momoe::eval::evaluate_predictions;
use momoe::moa::{build_aggregator_prompt, run_moa, AgentSpec, BoundAgent, Script, ScriptRule};
use momoe::model::{Model, ModelConfig, TokenBatch};
use momoe::moe::{
    expert_forward, load_balance_loss, moe_forward, route, ExpertParams, MoeConfig, MoeParams, RoutingDecision,
};
use momoe::numerics::{Matrix, SeededRng};
use momoe::sft::{
    assign_templates, render_example, synth_corpus, SentimentLabel, TemplatePolicy, TemplateSet,
};
use momoe::train::{batch_from_examples, fit, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// 1. gradient correctness
fn gradient_check() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in [0u64, 1, 2] {
        let mut cfg = ModelConfig::small(8, 2, 2, 16);
        cfg.moe = MoeConfig {
            num_experts: 4,
            top_k: 2,
            model_dim: 8,
            expert_hidden: 16,
            alpha: 0.01,
        };
        cfg.init_seed = seed;
        let model = Model::build(cfg).map_err(|e| e.to_string())?;
        let mut rng = SeededRng::new(100 + seed);
        let ids = (0..2).map(|_| (0..16).map(|_| rng.below(259) as u32).collect()).collect();
        let batch = TokenBatch::new(ids, vec![vec![true; 16]; 2]).map_err(|e| e.to_string())?;
        let r = model.gradient_check(&batch, 0.01, 1e-5).map_err(|e| e.to_string())?;
        check(r.max_rel_error < TOL, || {
            format!(
                "seed {seed}: max rel error {:.3e} at {}[{}]",
                r.max_rel_error, r.worst_tensor, r.worst_index
            )
        })?;
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("3 seeds, worst rel error {worst:.2e} < 1e-4, {secs:.1}s"))
}

// 2. routing invariants
fn routing_invariants() -> Outcome {
    let (d, e, k) = (8, 4, 2);
    let mut rng = SeededRng::new(2);
    let h = Matrix::random_normal(1000, d, 1.0, &mut rng);
    let w = Matrix::random_normal(d, e, 1.0, &mut rng);
    let g = momoe::numerics::matmul(&h, &w).map_err(|e| e.to_string())?;
    let decisions = route(&g, k).map_err(|e| e.to_string())?;
    check(decisions.len() == 1000, || "wrong decision count".into())?;
    for (t, dcs) in decisions.iter().enumerate() {
        let distinct: HashSet<_> = dcs.selected.iter().collect();
        check(dcs.selected.len() == k && distinct.len() == k, || {
            format!("token {t}: selected {:?}", dcs.selected)
        })?;
        let ws: f64 = dcs.weights.iter().sum();
        let ps: f64 = dcs.probs.iter().sum();
        check((ws - 1.0).abs() <= 1e-12, || format!("token {t}: weights sum {ws}"))?;
        check((ps - 1.0).abs() <= 1e-12, || format!("token {t}: probs sum {ps}"))?;
    }
    let tie = route(&Matrix::zeros(1, 4), 2).map_err(|e| e.to_string())?;
    check(tie[0].selected == vec![0, 1], || format!("tie selected {:?}", tie[0].selected))?;
    Ok("1000 tokens: k distinct experts, weight and prob sums within 1e-12; tie -> [0, 1]".into())
}

fn decision(probs: Vec<f64>, selected: Vec<usize>) -> RoutingDecision {
    let mass: f64 = selected.iter().map(|&i| probs[i]).sum();
    let weights = selected.iter().map(|&i| probs[i] / mass).collect();
    RoutingDecision {
        probs,
        selected,
        weights,
    }
}

/// Every expert chosen equally often and every probability 1/E.
fn uniform_decisions(e: usize, k: usize) -> Vec<RoutingDecision> {
    (0..e)
        .map(|t| decision(vec![1.0 / e as f64; e], (0..k).map(|j| (t + j) % e).collect()))
        .collect()
}

/// Every token on experts 0..k with all probability mass there.
fn collapsed_decisions(e: usize, k: usize, tokens: usize) -> Vec<RoutingDecision> {
    (0..tokens)
        .map(|_| {
            let mut p = vec![0.0; e];
            p[..k].fill(1.0 / k as f64);
            decision(p, (0..k).collect())
        })
        .collect()
}

// 3. load-balance closed forms
fn balance_closed_forms() -> Outcome {
    let uni = load_balance_loss(&uniform_decisions(4, 2), 4, 2).map_err(|e| e.to_string())?;
    check((uni.loss - 0.125).abs() <= 1e-12, || format!("uniform loss {}", uni.loss))?;
    let col = load_balance_loss(&collapsed_decisions(4, 2, 10), 4, 2).map_err(|e| e.to_string())?;
    check((col.loss - 0.25).abs() <= 1e-12, || format!("collapsed loss {}", col.loss))?;
    let mut pairs = 0;
    for e in 2..=16usize {
        for k in 1..e {
            let lo = k as f64 / (e * e) as f64;
            let hi = 1.0 / e as f64;
            check(lo < hi, || format!("E={e} k={k}: {lo} >= {hi}"))?;
            let u = load_balance_loss(&uniform_decisions(e, k), e, k).map_err(|x| x.to_string())?;
            let c = load_balance_loss(&collapsed_decisions(e, k, 3), e, k).map_err(|x| x.to_string())?;
            check((u.loss - lo).abs() <= 1e-12 && (c.loss - hi).abs() <= 1e-12, || {
                format!("E={e} k={k}: uniform {} collapsed {}", u.loss, c.loss)
            })?;
            pairs += 1;
        }
    }
    Ok(format!("uniform 0.125, collapsed 0.25; k/E^2 < 1/E on {pairs} (E,k) pairs"))
}

// 4. identity-expert invariance
fn cloned_experts() -> Outcome {
    let cfg = MoeConfig::with_model_dim(8);
    let mut rng = SeededRng::new(4);
    let base = ExpertParams::init(8, cfg.expert_hidden, &mut rng);
    let h = Matrix::random_normal(12, 8, 1.0, &mut rng);
    let (single, _) = expert_forward(&h, &base).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = MoeParams {
            w_router: Matrix::random_normal(8, cfg.num_experts, 2.0, &mut rng),
            experts: vec![base.clone(); cfg.num_experts],
        };
        let out = moe_forward(&h, &params, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(out.y.max_abs_diff(&single));
    }
    check(worst < 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("100 routers, max deviation {worst:.2e} < 1e-10"))
}

fn rendered(n: usize, seed: u64) -> Vec<momoe::sft::SftExample> {
    let corpus = synth_corpus(n, seed);
    let mut rng = SeededRng::new(0);
    let tpl = assign_templates(n, TemplatePolicy::RoundRobin, &mut rng);
    corpus
        .iter()
        .zip(tpl)
        .enumerate()
        .map(|(i, (c, (q, p)))| {
            let mut e = render_example(&c.text, c.label, q, p).expect("synthetic text renders");
            e.corpus_index = i;
            e
        })
        .collect()
}

fn frozen_tensors(m: &Model) -> Vec<(String, Matrix)> {
    m.named_tensors()
        .into_iter()
        .filter(|(_, _, trainable)| !trainable)
        .map(|(n, t, _)| (n, t.clone()))
        .collect()
}

// 5. frozen invariance
fn frozen_invariance() -> Outcome {
    let examples = rendered(300, 5);
    let mut cfg = ModelConfig::small(8, 2, 2, 192);
    cfg.moe.expert_hidden = 16;
    let init = Model::build(cfg).map_err(|e| e.to_string())?;

    let mut trained = init.clone();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 3,
        epochs: 2,
        max_steps: Some(100),
        ..TrainConfig::default()
    };
    let log = fit(&mut trained, &examples, &tc, |_, _| {}).map_err(|e| e.to_string())?;
    check(log.len() == 100, || format!("{} steps ran", log.len()))?;
    let before = frozen_tensors(&init);
    let after = frozen_tensors(&trained);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let same = a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
        check(same, || format!("frozen tensor {name} changed"))?;
    }
    check(trained.moe != init.moe, || "MoE tensors did not move at lr 1e-2".into())?;

    let mut still = init.clone();
    for chunk in examples.chunks(3).take(100) {
        let batch = batch_from_examples(chunk).map_err(|e| e.to_string())?;
        still.train_step(&batch, 0.0, 0.01).map_err(|e| e.to_string())?;
    }
    let bit_same = still
        .named_tensors()
        .iter()
        .zip(init.named_tensors().iter())
        .all(|((_, a, _), (_, b, _))| a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(bit_same, || "a tensor changed with learning rate 0".into())?;
    Ok(format!(
        "{} frozen tensors bit-identical after 100 steps; all tensors bit-identical at lr 0",
        before.len()
    ))
}

// 6. learning smoke
fn learning_smoke() -> Outcome {
    let start = Instant::now();
    let examples = rendered(50, 42);
    let mut model = Model::build(ModelConfig::default()).map_err(|e| e.to_string())?;
    let tc = TrainConfig::default();
    let lr = 1e-2;
    // one batch holds the whole subset at the default batch size
    let batch = batch_from_examples(&examples).map_err(|e| e.to_string())?;
    check(examples.len() <= tc.batch_size, || "subset larger than one batch".into())?;
    // the trunk is frozen, so its features are computed once
    let features = model.trunk(&batch).map_err(|e| e.to_string())?;
    let initial = model.evaluate(&batch, tc.alpha).map_err(|e| e.to_string())?.task_loss;
    for _ in 0..500 {
        model
            .train_step_on_features(&features, &batch, lr, tc.alpha)
            .map_err(|e| e.to_string())?;
    }
    let fin = model.evaluate(&batch, tc.alpha).map_err(|e| e.to_string())?.task_loss;
    let ratio = fin / initial;
    let secs = start.elapsed().as_secs_f64();
    check(ratio <= 0.8, || format!("label CE {initial:.4} -> {fin:.4} (ratio {ratio:.3})"))?;
    check(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!("label CE {initial:.4} -> {fin:.4}, ratio {ratio:.3} <= 0.8, {secs:.0}s"))
}

// 7. balance-loss decomposition
fn balance_identity() -> Outcome {
    let examples = rendered(40, 7);
    let mut cfg = ModelConfig::small(8, 2, 2, 192);
    cfg.moe.expert_hidden = 16;
    let init = Model::build(cfg).map_err(|e| e.to_string())?;
    let mut finals = Vec::new();
    let mut steps = 0;
    for alpha in [0.0, 0.01] {
        let tc = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 2,
            alpha,
            ..TrainConfig::default()
        };
        let mut m = init.clone();
        for s in fit(&mut m, &examples, &tc, |_, _| {}).map_err(|e| e.to_string())? {
            let gap = (s.total - s.task_loss) - alpha * s.balance_loss;
            check(gap.abs() <= 1e-12, || format!("alpha {alpha} step {}: gap {gap:e}", s.step))?;
            steps += 1;
        }
        finals.push(m.moe.w_router);
    }
    check(finals[0] != finals[1], || "alpha had no effect on the router".into())?;
    Ok(format!("identity holds at all {steps} logged steps; routers differ between alpha 0 and 0.01"))
}

fn scripted(name: &str, reply: &str) -> BoundAgent {
    BoundAgent::from_spec(&AgentSpec::fixed(name, reply)).expect("valid scripted spec")
}

/// Aggregator that follows the proposers in `text`: the majority label
/// wins unless `override_with` is given.
fn aggregator(override_with: Option<&str>) -> BoundAgent {
    let rules = match override_with {
        Some(label) => vec![ScriptRule {
            contains: "Original prompt:".into(),
            reply: format!("Despite the majority, the final answer is {label}."),
        }],
        None => vec![ScriptRule {
            contains: "Original prompt:".into(),
            reply: "Most agents agree, so the sentiment is negative.".into(),
        }],
    };
    BoundAgent::from_spec(&AgentSpec::scripted(
        "aggregator",
        Script {
            rules,
            ..Script::default()
        },
    ))
    .expect("valid scripted spec")
}

fn compare_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("MOMOE_BLESS").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    check(expected == actual, || format!("{name} differs from the aggregator prompt"))
}

// 8. MoA golden scenarios
fn moa_golden() -> Outcome {
    let prompt = momoe::sft::render_prompt(
        "Classify the sentiment of this passage:",
        "Nordic Steel raised its full-year guidance after record orders.",
        "The correct sentiment is:",
    );
    let proposers = [
        scripted("llamoe", "The sentiment of this text is: negative"),
        scripted("gpt", "negative"),
        scripted("deepseek", "Positive. Record orders and raised guidance."),
    ];

    let fixed = run_moa(&prompt, &proposers, &aggregator(Some("positive"))).map_err(|e| e.to_string())?;
    check(fixed.final_label == Some(SentimentLabel::Positive), || {
        format!("override scenario final {:?}", fixed.final_label)
    })?;
    check(fixed.flags.disagreement, || "override scenario: disagreement not flagged".into())?;
    compare_golden("aggregator_three_ok.txt", &fixed.aggregator_prompt)?;

    let follow = run_moa(&prompt, &proposers, &aggregator(None)).map_err(|e| e.to_string())?;
    check(follow.final_label == Some(SentimentLabel::Negative), || {
        format!("majority scenario final {:?}", follow.final_label)
    })?;
    check(follow.status == momoe::moa::RunStatus::Ok, || "majority scenario not recorded as ok".into())?;

    let mut responses = fixed.responses.clone();
    responses[0].status = momoe::moa::ResponseStatus::Timeout;
    responses[0].text.clear();
    responses[1].status = momoe::moa::ResponseStatus::Error;
    responses[1].text.clear();
    let partial = build_aggregator_prompt(&prompt, &responses).map_err(|e| e.to_string())?;
    compare_golden("aggregator_partial.txt", &partial)?;

    let again = run_moa(&prompt, &proposers, &aggregator(Some("positive"))).map_err(|e| e.to_string())?;
    check(again.without_timing() == fixed.without_timing(), || "repeat run differs".into())?;
    Ok("override -> positive with disagreement; majority -> negative; golden prompts match".into())
}

// 9. metrics oracle
fn metrics_oracle() -> Outcome {
    use SentimentLabel::{Negative as N, Neutral as U, Positive as P};
    let r = evaluate_predictions(&[P, P, N, U], &[Some(P), Some(N), Some(N), Some(U)]).map_err(|e| e.to_string())?;
    check(r.accuracy == 0.75, || format!("accuracy {}", r.accuracy))?;
    // hand computation: F1 per class 2/3, 2/3, 1
    let oracle = (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0;
    check((r.macro_avg.f1 - 0.7778).abs() <= 1e-4 && (r.macro_avg.f1 - oracle).abs() < 1e-12, || {
        format!("macro F1 {}", r.macro_avg.f1)
    })?;
    let golds: Vec<_> = (0..9).map(|i| SentimentLabel::ALL[i % 3]).collect();
    let preds: Vec<_> = golds.iter().map(|&g| Some(g)).collect();
    let p = evaluate_predictions(&golds, &preds).map_err(|e| e.to_string())?;
    let all_one = [
        p.accuracy,
        p.macro_avg.f1,
        p.macro_avg.precision,
        p.macro_avg.recall,
        p.weighted_avg.f1,
        p.weighted_avg.precision,
        p.weighted_avg.recall,
    ]
    .iter()
    .chain(p.per_class.iter().flat_map(|c| [c.precision, c.recall, c.f1].to_vec()).collect::<Vec<_>>().iter())
    .all(|&v| v == 1.0);
    check(all_one, || "perfect case has a metric below 1".into())?;
    Ok(format!("accuracy 0.75, macro F1 {:.4}; perfect case all 1.0", r.macro_avg.f1))
}

// 10. template fidelity
fn template_fidelity() -> Outcome {
    let golden = std::fs::read_to_string(golden_dir().join("templates.txt")).map_err(|e| e.to_string())?;
    let t = TemplateSet::default();
    let mut rendered = String::from("[questions]\n");
    for q in &t.questions {
        rendered.push_str(q);
        rendered.push('\n');
    }
    rendered.push_str("[prefixes]\n");
    for p in &t.prefixes {
        rendered.push_str(p);
        rendered.push('\n');
    }
    check(t.questions.len() == 15 && t.prefixes.len() == 10, || "wrong template counts".into())?;
    check(rendered == golden, || "template text differs from golden file".into())?;
    let mut rng = SeededRng::new(0);
    let pairs: HashSet<_> = assign_templates(150, TemplatePolicy::RoundRobin, &mut rng).into_iter().collect();
    check(pairs.len() == 150, || format!("{} distinct pairs", pairs.len()))?;
    Ok("15 questions and 10 prefixes byte-identical; 150 items cover all 150 pairs once".into())
}

fn momoe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_momoe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("momoe {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn read(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

// 11. end-to-end determinism
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"model_dim": 8, "num_heads": 2, "num_layers": 2},
            "train": {"batch_size": 8, "learning_rate": 0.01, "epochs": 10},
            "data": {"synth_count": 120, "split": {"test_count": 10}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        let s = |p: &Path| p.to_str().expect("utf-8 temp path").to_string();
        let (c, data, model, eval) = (s(&cfg), s(&dir.join("data")), s(&dir.join("train")), s(&dir.join("eval")));
        momoe(&["build-dataset", "--config", &c, "--seed", "11", "--out", &data])?;
        momoe(&["train", "--config", &c, "--seed", "11", "--data", &data, "--steps", "50", "--out", &model])?;
        let ck = s(&dir.join("train/model.ckpt"));
        let test = s(&dir.join("data/test.jsonl"));
        momoe(&["eval", "--config", &c, "--checkpoint", &ck, "--dataset", &test, "--out", &eval])?;
        outputs.push((
            read(&dir.join("train/loss_log.jsonl"))?,
            read(&dir.join("eval/metrics.json"))?,
        ));
    }
    let steps = outputs[0].0.lines().count();
    check(steps == 50, || format!("loss log has {steps} lines"))?;
    check(outputs[0].0 == outputs[1].0, || "loss logs differ".into())?;
    check(outputs[0].1 == outputs[1].1, || "metrics reports differ".into())?;
    Ok("two seeded build-dataset -> train 50 steps -> eval runs: loss logs and metrics identical".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_check),
        ("routing invariants", routing_invariants),
        ("load-balance closed forms", balance_closed_forms),
        ("identity-expert invariance", cloned_experts),
        ("frozen invariance", frozen_invariance),
        ("learning smoke", learning_smoke),
        ("balance-loss decomposition", balance_identity),
        ("MoA golden scenarios", moa_golden),
        ("metrics oracle", metrics_oracle),
        ("template fidelity", template_fidelity),
        ("end-to-end determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|flt| !name.contains(flt.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS  [{:>2}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  [{:>2}] {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
