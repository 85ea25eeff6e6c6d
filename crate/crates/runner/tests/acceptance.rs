//! Acceptance suite: nine property and oracle checks, one PASS/FAIL line
//! each. Runs as a plain binary so the report is always printed; exits
//! nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ra_core::dataset::{build_ft_dataset, write_ft_manifest, write_manifest, BaseDecision, Caption};
use ra_core::metrics::{iou_sweep, match_instances, EvalRecord, DEFAULT_IOU_SWEEP};
use ra_core::parser::{default_parser, FTSample};
use ra_core::reward::{reflection_reward, total_reward, ReflConfig, RewardConfig};
use ra_core::toy_rl::{
    analytic_optimum, surrogate_gradient, surrogate_objective, train, Action, Choice, PolicyParams, Sample, ToyEnv,
    TrainOptions,
};
use ra_core::{
    parse_response, Answer, BBox, BuildConfig, Decision, Difficulty, GroundTruthRecord, Label, Mode, Scene, Taxonomy,
    TypeLabel, Verdict,
};
use ra_runner::collect::{read_responses, ResponseRecord};
use ra_runner::score::score;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, f64, fn() -> Outcome); 9] = [
        ("reflection reward table (32 cases)", 1.0, reflection_table),
        ("accuracy gating law (10,000 pairs)", 5.0, gating_law),
        ("matching vs exhaustive search (1,000 instances)", 30.0, matching_oracle),
        ("IoU sweep monotonicity (100 record sets)", 10.0, sweep_monotone),
        ("reflective rates 0.30/0.70 and byte-identical rebuild", 10.0, dataset_rates),
        ("serialize/parse round trip (10,000 samples)", 10.0, round_trip),
        ("toy GRPO reflection behaviour", 60.0, toy_grpo),
        ("policy gradient vs finite differences (100 points)", 5.0, gradient_check),
        ("oracle closure on 500-record manifest", 5.0, oracle_closure),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs_f64(*budget);
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.2}s of {budget}s){}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { " over time budget" },
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- generators

fn leaves() -> Vec<&'static str> {
    Taxonomy::bundled().leaves().collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    // 1/100 grid so printed coordinates re-parse exactly
    let x1 = rng.gen_range(0..99u32);
    let y1 = rng.gen_range(0..99u32);
    let x2 = rng.gen_range(x1 + 1..=100);
    let y2 = rng.gen_range(y1 + 1..=100);
    BBox::new(x1 as f64 / 100.0, y1 as f64 / 100.0, x2 as f64 / 100.0, y2 as f64 / 100.0).unwrap()
}

fn random_gt(rng: &mut ChaCha8Rng, id: String) -> GroundTruthRecord {
    let anomalous = rng.gen::<bool>();
    let (types, boxes) = if anomalous {
        let k = rng.gen_range(1..=3);
        let types = leaves().choose_multiple(rng, k).map(|s| s.to_string()).collect();
        let n = rng.gen_range(1..=3);
        (types, (0..n).map(|_| random_box(rng)).collect())
    } else {
        (vec![], vec![])
    };
    GroundTruthRecord {
        image: format!("{id}.png"),
        sample_id: id,
        scene: Scene::ALL[rng.gen_range(0..4)],
        category: ["tile", "screw", "pcb", "juice_bottle"][rng.gen_range(0..4)].into(),
        label: if anomalous { Label::Anomalous } else { Label::Normal },
        types,
        boxes,
    }
}

/// Loosely structured response text: any answer or none, known and unknown
/// types, boxes, optional reflection.
fn random_response(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    if rng.gen_bool(0.9) {
        let think = ["it looks normal", "the surface is defective", "hard to tell", ""][rng.gen_range(0..4)];
        s += &format!("<think>{think}</think>");
    }
    if rng.gen_bool(0.5) {
        s += "<reflection>on a second look</reflection>";
    }
    for _ in 0..rng.gen_range(0..4) {
        s += &format!("<location>{}</location>", random_box(rng));
    }
    let n_types = rng.gen_range(0..4);
    if n_types > 0 {
        let pool: Vec<&str> = leaves().into_iter().chain(["Damage", "Logical Anomaly", "lamp"]).collect();
        let t: Vec<&str> = (0..n_types).map(|_| *pool.choose(rng).unwrap()).collect();
        s += &format!("<type>{}</type>", t.join("; "));
    }
    if rng.gen_bool(0.9) {
        s += &format!("<answer>{}</answer>", ["yes", "no", "unsure"][rng.gen_range(0..3)]);
    }
    s
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz ABCDEFGHIJ0123456789.,;:()'-\n";
    let n = rng.gen_range(0..80);
    (0..n).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect()
}

fn oracle_text(gt: &GroundTruthRecord) -> String {
    let sample = FTSample {
        sample_id: gt.sample_id.clone(),
        mode: Mode::Thinking,
        think: "Inspected the whole image.".into(),
        reflection: None,
        answer: gt.label.verdict(),
        types: gt.types.clone(),
        boxes: gt.boxes.clone(),
        scene: gt.scene,
    };
    default_parser().serialize_target(&sample).unwrap()
}

// ---------------------------------------------------------------- criteria

fn reflection_table() -> Outcome {
    // expected reward for (correction, ineffective, erroneous) per config
    let table = [
        (ReflConfig::A, [1.0, 0.5, 0.0]),
        (ReflConfig::B, [1.0, 0.5, -1.0]),
        (ReflConfig::C, [1.0, 0.0, -1.0]),
        (ReflConfig::D, [1.0, -0.5, -1.0]),
    ];
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for (cfg, [fix, ineffective, erroneous]) in table {
        for truth in [Label::Anomalous, Label::Normal] {
            for y0 in [Verdict::Yes, Verdict::No] {
                for y1 in [Verdict::Yes, Verdict::No] {
                    let right = |v: Verdict| (v == Verdict::Yes) == (truth == Label::Anomalous);
                    let expected = match (right(y0), right(y1)) {
                        (false, true) => fix,
                        (true, false) => erroneous,
                        _ => ineffective,
                    };
                    let got = reflection_reward(Decision::from(y0), Answer::from(y1), truth, cfg);
                    cases += 1;
                    if got != expected {
                        mismatches.push(format!("{cfg:?} {y0:?}->{y1:?} truth {truth:?}: {got} != {expected}"));
                    }
                }
            }
        }
    }
    check(
        cases == 32 && mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{cases} cases, all exact")
        } else {
            format!("{cases} cases, {} mismatches: {}", mismatches.len(), mismatches.join("; "))
        },
    )
}

fn gating_law() -> Outcome {
    let tax = Taxonomy::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = RewardConfig::default();
    let mut violations = 0;
    let mut gated = 0;
    for i in 0..10_000 {
        let gt = random_gt(&mut rng, format!("g{i}"));
        let resp = parse_response(&random_response(&mut rng));
        let r = total_reward(&resp, &gt, tax, &cfg);
        if r.r_ans == 0.0 {
            gated += 1;
            if r.r_type != 0.0 || r.r_loc != 0.0 {
                violations += 1;
            }
        }
        if (r.r_acc - (r.r_ans + 0.5 * (r.r_type + r.r_loc))).abs() > 1e-12 {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} violations, {gated} pairs with r_ans = 0"))
}

/// Maximum matching size by trying, for each prediction in turn, every free
/// eligible gt and also leaving it unmatched.
fn brute_force(n_p: usize, n_g: usize, adj: &[Vec<bool>]) -> usize {
    fn go(p: usize, adj: &[Vec<bool>], used: &mut [bool]) -> usize {
        if p == adj.len() {
            return 0;
        }
        let mut best = go(p + 1, adj, used);
        for g in 0..used.len() {
            if adj[p][g] && !used[g] {
                used[g] = true;
                best = best.max(1 + go(p + 1, adj, used));
                used[g] = false;
            }
        }
        best
    }
    debug_assert_eq!(adj.len(), n_p);
    go(0, adj, &mut vec![false; n_g])
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let n_p = rng.gen_range(0..=6);
        let n_g = rng.gen_range(0..=6);
        let density = rng.gen_range(0.1..0.9);
        let adj: Vec<Vec<bool>> = (0..n_p).map(|_| (0..n_g).map(|_| rng.gen_bool(density)).collect()).collect();
        let pairs = match_instances(n_p, n_g, |p, g| adj[p][g]);
        let distinct_p: BTreeSet<_> = pairs.iter().map(|x| x.0).collect();
        let distinct_g: BTreeSet<_> = pairs.iter().map(|x| x.1).collect();
        let valid = distinct_p.len() == pairs.len()
            && distinct_g.len() == pairs.len()
            && pairs.iter().all(|&(p, g)| adj[p][g]);
        if !valid || pairs.len() != brute_force(n_p, n_g, &adj) {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad} of 1000 instances differ from exhaustive enumeration"))
}

fn sweep_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    let mut example = None;
    for set in 0..100 {
        let n = rng.gen_range(1..60);
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| {
                let gt = random_gt(&mut rng, format!("s{set}-{i}"));
                // responses near the truth so the sweep is not trivially zero
                let text = if gt.label == Label::Anomalous && rng.gen_bool(0.7) {
                    let jitter = |v: f64, rng: &mut ChaCha8Rng| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                    let boxes: String = gt
                        .boxes
                        .iter()
                        .filter_map(|b| {
                            let [x1, y1, x2, y2] = b.coords();
                            BBox::new(jitter(x1, &mut rng), jitter(y1, &mut rng), jitter(x2, &mut rng), jitter(y2, &mut rng)).ok()
                        })
                        .map(|b| format!("<location>{b}</location>"))
                        .collect();
                    format!("<think>t</think>{boxes}<type>{}</type><answer>yes</answer>", gt.types.join("; "))
                } else {
                    random_response(&mut rng)
                };
                let id = gt.sample_id.clone();
                EvalRecord::new(gt, &id, parse_response(&text)).unwrap()
            })
            .collect();
        let s = iou_sweep(&records, &DEFAULT_IOU_SWEEP);
        let mut columns: Vec<Vec<f64>> = vec![s.overall.clone()];
        for j in 0..s.scenes.len() {
            columns.push(s.f1.iter().map(|row| row[j]).collect());
        }
        if columns.iter().any(|c| c.windows(2).any(|w| w[1] > w[0] + 1e-12)) {
            bad += 1;
        }
        if set == 0 {
            example = Some(s.overall.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("→"));
        }
    }
    check(
        bad == 0,
        format!("{bad} of 100 sets non-monotone; first set overall {}", example.unwrap_or_default()),
    )
}

fn dataset_inputs(n_per_class: usize) -> (Vec<GroundTruthRecord>, Vec<BaseDecision>, Vec<Caption>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut records = Vec::new();
    let mut base = Vec::new();
    let mut captions = Vec::new();
    for i in 0..2 * n_per_class {
        let gt = random_gt(&mut rng, format!("d{i:05}"));
        let truth = gt.label.verdict();
        // first half easy, second half hard; the order is shuffled below
        let hard = i >= n_per_class;
        base.push(BaseDecision {
            sample_id: gt.sample_id.clone(),
            predicted: if hard { truth.flip() } else { truth },
        });
        captions.push(Caption {
            sample_id: gt.sample_id.clone(),
            think: random_text(&mut rng),
            reflection: Some(random_text(&mut rng)),
        });
        records.push(gt);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let records = order.iter().map(|&i| records[i].clone()).collect();
    (records, base, captions)
}

fn dataset_rates() -> Outcome {
    let (records, base, captions) = dataset_inputs(10_000);
    let cfg = BuildConfig { seed: 2024, ..Default::default() };
    let built = build_ft_dataset(&records, &base, &captions, &cfg).unwrap();
    let rate = |d: Difficulty| {
        let of: Vec<_> = built.iter().filter(|r| r.difficulty == d).collect();
        (of.len(), of.iter().filter(|r| r.mode == Mode::Reflective).count() as f64 / of.len() as f64)
    };
    let (n_easy, easy) = rate(Difficulty::Easy);
    let (n_hard, hard) = rate(Difficulty::Hard);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_ft_manifest(&built, &a).unwrap();
    let again = build_ft_dataset(&records, &base, &captions, &cfg).unwrap();
    write_ft_manifest(&again, &b).unwrap();
    let identical = fs::read(&a).unwrap() == fs::read(&b).unwrap();

    check(
        n_easy == 10_000 && n_hard == 10_000 && (easy - 0.30).abs() <= 0.02 && (hard - 0.70).abs() <= 0.02 && identical,
        format!("easy {easy:.4} (n={n_easy}), hard {hard:.4} (n={n_hard}), rebuild identical: {identical}"),
    )
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let parser = default_parser();
    let mut bad = Vec::new();
    let mut failures = 0;
    for i in 0..10_000 {
        let yes = rng.gen::<bool>();
        let reflective = rng.gen::<bool>();
        let sample = FTSample {
            sample_id: format!("r{i}"),
            mode: if reflective { Mode::Reflective } else { Mode::Thinking },
            think: random_text(&mut rng),
            reflection: reflective.then(|| random_text(&mut rng)),
            answer: if yes { Verdict::Yes } else { Verdict::No },
            types: if yes {
                let k = rng.gen_range(1..=4);
                leaves().choose_multiple(&mut rng, k).map(|s| s.to_string()).collect()
            } else {
                vec![]
            },
            boxes: if yes { (0..rng.gen_range(1..=4)).map(|_| random_box(&mut rng)).collect() } else { vec![] },
            scene: Scene::ALL[rng.gen_range(0..4)],
        };
        let text = parser.serialize_target(&sample).unwrap();
        let r = parser.parse(&text);
        let types: Vec<TypeLabel> = sample.types.iter().cloned().map(TypeLabel::Known).collect();
        let equal = r.flags.is_empty()
            && r.think.as_deref() == Some(sample.think.as_str())
            && r.reflection == sample.reflection
            && r.answer == Answer::from(sample.answer)
            && r.types == types
            && r.boxes == sample.boxes;
        if !equal {
            failures += 1;
            if bad.len() < 3 {
                bad.push(text);
            }
        }
    }
    check(
        failures == 0,
        if bad.is_empty() {
            format!("{failures} failures")
        } else {
            format!("{failures} failures, first: {}", bad.join("; "))
        },
    )
}

fn toy_grpo() -> Outcome {
    let env = ToyEnv { p_easy: 0.9, p_hard: 0.4, q_reflect: 0.8, class_mix: 0.5, seed: 11 };
    let opts = TrainOptions { steps: 2000, group_size: 4, ..Default::default() };
    let cfg = |refl| RewardConfig { lambda_c: 1.0, lambda_a: 1.0, lambda_r: 1.0, refl_config: refl, ..Default::default() };
    let d = train(&env, &cfg(ReflConfig::D), &opts).unwrap();
    let a = train(&env, &cfg(ReflConfig::A), &opts).unwrap();
    let opt_d = analytic_optimum(&env, &cfg(ReflConfig::D));
    let opt_a = analytic_optimum(&env, &cfg(ReflConfig::A));
    let agrees = |rate: f64, choice: Choice| match choice {
        Choice::Reflect => rate > 0.5,
        Choice::Keep => rate < 0.5,
        Choice::Tie => true,
    };
    let pass = d.reflect_rate_hard > 0.8
        && d.reflect_rate_easy < 0.2
        && a.reflect_rate_easy > 0.5
        && agrees(d.reflect_rate_easy, opt_d[0].choice)
        && agrees(d.reflect_rate_hard, opt_d[1].choice)
        && agrees(a.reflect_rate_easy, opt_a[0].choice)
        && agrees(a.reflect_rate_hard, opt_a[1].choice);
    check(
        pass,
        format!(
            "(d) easy {:.3} hard {:.3}; (a) easy {:.3} hard {:.3}; analytic (d) {:?}/{:?}, (a) {:?}/{:?}",
            d.reflect_rate_easy,
            d.reflect_rate_hard,
            a.reflect_rate_easy,
            a.reflect_rate_hard,
            opt_d[0].choice,
            opt_d[1].choice,
            opt_a[0].choice,
            opt_a[1].choice
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut logits = [[0.0; 2]; 2];
        let mut reference = [[0.0; 2]; 2];
        for s in 0..2 {
            for a in 0..2 {
                logits[s][a] = rng.gen_range(-3.0..3.0);
                reference[s][a] = rng.gen_range(-1.0..1.0);
            }
        }
        let policy = PolicyParams { logits, reference_logits: reference };
        let beta = rng.gen_range(0.0..2.0);
        let samples: Vec<Sample> = (0..rng.gen_range(1..24))
            .map(|_| Sample {
                difficulty: if rng.gen::<bool>() { Difficulty::Easy } else { Difficulty::Hard },
                action: if rng.gen::<bool>() { Action::Reflect } else { Action::Keep },
                advantage: rng.gen_range(-2.0..2.0),
            })
            .collect();
        let g = surrogate_gradient(&policy, &samples, beta);
        for s in 0..2 {
            for a in 0..2 {
                let (mut plus, mut minus) = (policy, policy);
                plus.logits[s][a] += h;
                minus.logits[s][a] -= h;
                let fd = (surrogate_objective(&plus, &samples, beta) - surrogate_objective(&minus, &samples, beta)) / (2.0 * h);
                let scale = g[s][a].abs().max(fd.abs());
                let err = if scale < 1e-8 { (g[s][a] - fd).abs() } else { (g[s][a] - fd).abs() / scale };
                worst = worst.max(err);
            }
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

fn oracle_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<GroundTruthRecord> = (0..500).map(|i| random_gt(&mut rng, format!("o{i:03}"))).collect();
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("manifest.jsonl");
    let responses_path = dir.path().join("responses.jsonl");
    write_manifest(&records, &manifest_path).unwrap();
    let lines: String = records
        .iter()
        .map(|gt| serde_json::to_string(&ResponseRecord::text(&gt.sample_id, oracle_text(gt))).unwrap() + "\n")
        .collect();
    fs::write(&responses_path, lines).unwrap();

    let manifest = ra_core::dataset::read_manifest(&manifest_path, Taxonomy::bundled()).unwrap();
    let responses: BTreeMap<String, ResponseRecord> = read_responses(&responses_path).unwrap();
    let out = score(
        &manifest,
        &responses,
        default_parser(),
        &RewardConfig::default(),
        &Default::default(),
    )
    .unwrap();
    let mut values = vec![
        out.report.average.accuracy,
        out.report.average.balanced_accuracy,
        out.report.average.type_hard_f1,
        out.report.average.loc_hard_f1,
    ];
    for m in out.report.scenes.values() {
        values.extend([m.accuracy, m.balanced_accuracy, m.type_hard_f1, m.loc_hard_f1]);
    }
    let perfect = values.iter().all(|&v| v == 1.0) && out.report.scenes.len() == 4;
    check(
        perfect,
        format!(
            "average acc {:.3} bal {:.3} type-F1 {:.3} loc-F1 {:.3} over {} scenes",
            values[0],
            values[1],
            values[2],
            values[3],
            out.report.scenes.len()
        ),
    )
}
