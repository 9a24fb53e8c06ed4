//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the learning runs can be shared between criteria 12 and 13
//! and every line is printed even when an earlier criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mcofl::agent::{conjecture_bruteforce, conjecture_critic, critic_input, critic_step, expectile_grad, expectile_loss, Agent, Settings, Variant};
use mcofl::conjgen::{kl_bound_check, softened_argmax};
use mcofl::env::obs_dim;
use mcofl::harness::{run, PolicySpec, RunRecord};
use mcofl::metrics::{action_payload_bytes, encode_action, hypervolume_exact, hypervolume_mc};
use mcofl::neural::{gradient_check, relative_error, Mlp, Optimizer};
use mcofl::quantizer::{dequantize, payload_bits, quantize};
use mcofl::sysmodel::{energy_cmp, latency_cmp, tx_rate, ClientProfile};
use mcofl::tabular::{
    contraction_probe, greedy_joint, iterate_to_fixed_point, penalty_game, run_async, team_game, two_state_game, Operator,
    QTableJoint, Variant as OpVariant,
};
use mcofl::tcad::{enumerate_deltas, initial_action, Action, ActionBounds, Granularity};
use mcofl::{rng_stream, ExperimentConfig};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn c1_quantizer_unbiased() -> Outcome {
    let mut rng = rng_stream(1, "acceptance/quantizer");
    let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
    let draws = 100_000;
    let mut worst = 0.0f64;
    for q in [2, 8, 32] {
        let mut sum = vec![0.0; v.len()];
        let mut sq = vec![0.0; v.len()];
        for _ in 0..draws {
            let d = dequantize(&quantize(&v, q, &mut rng).unwrap());
            for i in 0..v.len() {
                sum[i] += d[i];
                sq[i] += d[i] * d[i];
            }
        }
        for i in 0..v.len() {
            let mean = sum[i] / draws as f64;
            let var = (sq[i] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            let z = if se > 0.0 { (mean - v[i]).abs() / se } else if (mean - v[i]).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
            worst = worst.max(z);
        }
    }
    outcome(worst <= 4.0, format!("worst element deviation {worst:.2} standard errors"))
}

fn c2_payload() -> Outcome {
    let a = payload_bits(21_840, 8);
    let b = payload_bits(21_840, 2);
    outcome(a == 87_392 && b == 43_712, format!("q=8: {a} bits, q=2: {b} bits"))
}

fn c3_physical() -> Outcome {
    let profile = ClientProfile {
        capacitance: 1e-27,
        cycles_per_sample: vec![6.07e5],
        dataset_size: vec![1e4],
        channel_gain: 10f64.powf(-70.0 / 10.0),
        tx_power: 10f64.powf((20.0 - 30.0) / 10.0),
        noise_density: 10f64.powf((-174.0 - 30.0) / 10.0),
    };
    let e = energy_cmp(&profile, 0, 1e9).unwrap();
    let t = latency_cmp(&profile, 0, 1e9).unwrap();
    let rate = tx_rate(1e6, profile.channel_gain, profile.tx_power, profile.noise_density).unwrap();
    let oracle = 1e6 * (1.0 + profile.channel_gain * profile.tx_power / (profile.noise_density * 1e6)).log2();
    let ok = relative_error(e, 6.07) < 1e-12
        && relative_error(t, 6.07) < 1e-12
        && relative_error(rate, 2.126e7) < 1e-3
        && relative_error(rate, oracle) < 1e-12;
    outcome(ok, format!("E_cmp {e} J, T_cmp {t} s, rate {rate:.6e} bit/s"))
}

fn c4_tcad() -> Outcome {
    let deltas = enumerate_deltas();
    let mut distinct: Vec<[i8; 4]> = deltas.iter().map(|d| d.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let cfg = ExperimentConfig::default();
    let settings = Settings::from_config(&cfg);
    let mut rng = rng_stream(4, "acceptance/tcad");
    let agent = Agent::new(&cfg, 0, Variant::Pac, &mut rng).unwrap();
    let obs: Vec<f64> = (0..obs_dim(cfg.num_sps)).map(|_| rng.random_range(0.0..1.0)).collect();
    let own = initial_action(&cfg);
    let current = vec![own; cfg.num_sps - 1];
    let c = agent.conjecture(&agent.critic, &obs, &own, &current, &settings, &mut rng).unwrap();
    let bounds = ActionBounds::from_config(&cfg);
    let gran = Granularity::from_config(&cfg);
    let mut calls = 0u64;
    let brute = conjecture_bruteforce(&current, &gran, &bounds, |opps| {
        calls += 1;
        agent.critic.forward(&critic_input(&obs, &own, opps, &bounds)).unwrap()[0]
    })
    .unwrap();
    let fast = conjecture_critic(&agent.critic, &obs, &own, &current, &gran, &bounds).unwrap();
    let ok = deltas.len() == 81
        && distinct.len() == 81
        && c.evaluations == 6561
        && calls == 6561
        && brute.deltas == fast.deltas
        && (brute.value - fast.value).abs() < 1e-9;
    outcome(ok, format!("{} deltas, {} critic evaluations per conjecture ({calls} by brute force)", deltas.len(), c.evaluations))
}

fn c5_gradients() -> Outcome {
    let mut rng = rng_stream(5, "acceptance/gradients");
    let net = Mlp::new(&[7, 32, 16, 4], &mut rng).unwrap();
    let x: Vec<f64> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mlp_err = gradient_check(&net, &x, 500, 1e-5, &mut rng).unwrap();
    let mut loss_err = 0.0f64;
    for _ in 0..2000 {
        let d: f64 = rng.random_range(-10.0..10.0);
        if d == 0.0 {
            continue;
        }
        let tau: f64 = rng.random_range(0.01..0.99);
        let h = 1e-6 * d.abs().max(1e-3);
        if d.abs() <= h {
            continue;
        }
        let numeric = (expectile_loss(&[d + h], tau) - expectile_loss(&[d - h], tau)) / (2.0 * h);
        loss_err = loss_err.max(relative_error(numeric, expectile_grad(d, tau)));
    }
    outcome(
        mlp_err <= 1e-5 && loss_err <= 1e-4,
        format!("network {mlp_err:.2e}, expectile loss {loss_err:.2e} worst relative error"),
    )
}

fn c6_contraction() -> Outcome {
    let game = two_state_game(0.9);
    let mut rng = rng_stream(6, "acceptance/contraction");
    let ops = [
        Operator::Pareto(OpVariant::Literal),
        Operator::Pareto(OpVariant::JointMax),
        Operator::Expectile { variant: OpVariant::JointMax, tau: 0.1 },
        Operator::Expectile { variant: OpVariant::JointMax, tau: 0.5 },
        Operator::Expectile { variant: OpVariant::JointMax, tau: 0.9 },
    ];
    let ratios: Vec<f64> = ops.iter().map(|op| contraction_probe(&game, *op, 1000, &mut rng).unwrap()).collect();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(worst <= 0.9 + 1e-12, format!("max ratios {ratios:.6?}"))
}

fn c7_fixed_point() -> Outcome {
    let game = team_game(0.9);
    let op = Operator::Pareto(OpVariant::JointMax);
    let fp = iterate_to_fixed_point(&game, op, QTableJoint::zeros(&game), 1e-10, 10_000).unwrap();
    // Closed form: Q*(a) = rwd(a) + 0.9 * 100 for both agents.
    let closed = [100.0, 90.0, 90.0, 95.0];
    let vi_err = fp.q.tables.iter().flat_map(|t| t.iter().zip(&closed).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
    let max_q = fp.q.max_entry();
    let sampled = run_async(&game, op, 100_000, 0.6, &mut rng_stream(7, "acceptance/async")).unwrap();
    let async_err = sampled.sup_distance(&fp.q);
    outcome(
        (max_q - 100.0).abs() <= 1e-6 && vi_err <= 1e-6 && async_err <= 1e-2,
        format!("max Q* {max_q:.9}, sampled-update sup error {async_err:.2e}"),
    )
}

fn c8_equilibrium() -> Outcome {
    let game = penalty_game(0.9);
    let opt = Operator::Pareto(OpVariant::JointMax);
    let hi = iterate_to_fixed_point(&game, opt, QTableJoint::zeros(&game), 1e-10, 10_000).unwrap();
    let lo = iterate_to_fixed_point(&game, Operator::Pessimistic, QTableJoint::zeros(&game), 1e-10, 10_000).unwrap();
    let a = greedy_joint(&hi.q, opt, 0);
    let b = greedy_joint(&lo.q, Operator::Pessimistic, 0);
    // Brute force over the payoff matrix: the best joint cell and the
    // max-min row, both of which must be pure equilibria.
    let pay = |i: usize, j: usize| game.rewards[0][0][game.joint_index(i, j)];
    let cells: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let best = *cells.iter().max_by(|x, y| pay(x.0, x.1).total_cmp(&pay(y.0, y.1))).unwrap();
    let row_min = |i: usize| (0..3).map(|j| pay(i, j)).fold(f64::INFINITY, f64::min);
    let safe = (0..3).max_by(|&x, &y| row_min(x).total_cmp(&row_min(y))).unwrap();
    let equilibrium = |i: usize, j: usize| (0..3).all(|k| pay(k, j) <= pay(i, j) && pay(i, k) <= pay(i, j));
    let ok = a == [best.0, best.1]
        && b == [safe, safe]
        && a == [0, 0]
        && b == [2, 2]
        && equilibrium(0, 0)
        && equilibrium(2, 2)
        && pay(0, 0) > pay(2, 2);
    outcome(ok, format!("optimistic {a:?} pays {}, pessimistic {b:?} pays {}", pay(a[0], a[1]), pay(b[0], b[1])))
}

fn c9_bound() -> Outcome {
    let mut rng = rng_stream(9, "acceptance/bound");
    let trials = 1000;
    let mut held = 0;
    for _ in 0..trials {
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - q.iter().cloned().fold(f64::INFINITY, f64::min);
        let target = softened_argmax(&q, rng.random_range(0.01..3.0));
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(1e-3..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let approx: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let b = kl_bound_check(&q, &approx, &target, c).unwrap();
        // Recompute both sides by hand.
        let max_q = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let kl: f64 = approx.iter().zip(&target).map(|(a, t)| a * (a / t).ln()).sum();
        let lhs = (approx.iter().zip(&q).map(|(a, v)| a * v).sum::<f64>() - max_q).abs();
        let slack = (target.iter().zip(&q).map(|(a, v)| a * v).sum::<f64>() - max_q).abs();
        let rhs = c * kl.max(0.0).sqrt() + slack;
        if b.holds && lhs <= rhs + 1e-12 && (b.lhs - lhs).abs() < 1e-9 && (b.rhs - rhs).abs() < 1e-9 {
            held += 1;
        }
    }
    outcome(held == trials, format!("bound held in {held}/{trials} instances"))
}

fn c10_hvi() -> Outcome {
    let fixture = hypervolume_exact(&[vec![0.3, 0.9], vec![0.9, 0.3]], &[1.1, 1.1]).unwrap();
    let mut rng = rng_stream(10, "acceptance/hvi");
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.1)).collect()).collect();
        let exact = hypervolume_exact(&pts, &[1.1; 3]).unwrap();
        let est = hypervolume_mc(&pts, &[1.1; 3], 1_000_000, &mut rng);
        worst = worst.max((exact - est.value).abs() / est.std_error.max(1e-300));
        let dominated: Vec<f64> = pts[0].iter().map(|x| (x + rng.random_range(0.0..0.1)).min(1.1)).collect();
        let mut more = pts.clone();
        more.push(dominated);
        invariant &= (hypervolume_exact(&more, &[1.1; 3]).unwrap() - exact).abs() < 1e-12;
    }
    outcome(
        (fixture - 0.28).abs() < 1e-12 && worst <= 4.0 && invariant,
        format!("fixture {fixture:.15}, worst MC deviation {worst:.2} sigma, domination invariant {invariant}"),
    )
}

fn c11_action_share() -> Outcome {
    let cfg = ExperimentConfig::default();
    let a = Action { n: cfg.num_clients as u32, f: cfg.f_max, b: cfg.b_max, q: cfg.q_max };
    let bytes = encode_action(2, &a).len();
    let share = bytes as f64 / (21_840.0 * 4.0);
    outcome(
        bytes <= 14 && bytes < 20 && action_payload_bytes(&a) == bytes && share < 0.0002,
        format!("{bytes} bytes, {:.5}% of a 21,840-parameter float payload", share * 100.0),
    )
}

fn runs(policy: PolicySpec) -> Vec<RunRecord> {
    let cfg = ExperimentConfig::default();
    (0..SEEDS).map(|s| run(&cfg, policy, s).unwrap()).collect()
}

fn c12_learning(pac: &[RunRecord]) -> Outcome {
    let rising = pac.iter().filter(|r| r.final_fifth_total() >= r.first_fifth_total()).count();
    let pairs: Vec<String> = pac.iter().map(|r| format!("{:.1}->{:.1}", r.first_fifth_total(), r.final_fifth_total())).collect();
    outcome(rising >= 4, format!("final >= first on {rising}/{SEEDS} seeds [{}]", pairs.join(", ")))
}

fn c13_conjecture(pac: &[RunRecord], independent: &[RunRecord], generated: &[RunRecord]) -> Outcome {
    let wins = pac.iter().zip(independent).filter(|(a, b)| a.final_fifth_total() >= b.final_fifth_total()).count();
    let mean = |v: &[RunRecord]| v.iter().map(RunRecord::final_fifth_total).sum::<f64>() / v.len() as f64;
    let (m_pac, m_ind, m_gen) = (mean(pac), mean(independent), mean(generated));
    let gap = (m_gen - m_pac).abs() / m_pac.abs();
    let per_seed: Vec<String> = pac
        .iter()
        .zip(independent)
        .map(|(a, b)| format!("{:.1}/{:.1}", a.final_fifth_total(), b.final_fifth_total()))
        .collect();
    outcome(
        wins >= 4 && gap <= 0.10,
        format!(
            "pac >= independent_ac on {wins}/{SEEDS} seeds [{}]; means pac {m_pac:.1}, independent_ac {m_ind:.1}, pac_p {m_gen:.1} (gap {:.1}%)",
            per_seed.join(", "),
            gap * 100.0
        ),
    )
}

fn c14_expectile_equivalence() -> Outcome {
    let sizes = [6, 16, 1];
    let mut expectile = Mlp::new(&sizes, &mut rng_stream(14, "acceptance/critic")).unwrap();
    let mut plain = expectile.clone();
    let mut opt_e = Optimizer::adam(expectile.param_count());
    let mut opt_p = Optimizer::adam(plain.param_count());
    let mut data = rng_stream(14, "acceptance/critic-data");
    let mut drift = 0.0f64;
    for _ in 0..100 {
        let rows = 12;
        let x: Vec<f64> = (0..rows * 6).map(|_| data.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows).map(|_| data.random_range(-3.0..3.0)).collect();
        critic_step(&mut expectile, &mut opt_e, &x, &y, 0.5, 3e-3).unwrap();
        // Plain loss: mean of (y - Q)^2 / 2.
        let pred = plain.forward_train(&x, rows).unwrap();
        let up: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| (p - t) / rows as f64).collect();
        let (g, _) = plain.backward(&up).unwrap();
        opt_p.step(plain.params_mut(), &g, 3e-3).unwrap();
        drift = expectile.params().iter().zip(plain.params()).map(|(a, b)| (a - b).abs()).fold(drift, f64::max);
    }
    outcome(drift <= 1e-9, format!("max parameter gap over 100 updates {drift:.2e}"))
}

fn timed(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let passed = passed && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {:.0} s", l.as_secs_f64()));
    println!(
        "criterion {id:>2} {}: {name}: {detail} ({:.1} s{budget})",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}

fn main() {
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut passed = vec![
        timed(1, "quantizer unbiasedness", secs(10), c1_quantizer_unbiased),
        timed(2, "payload formula", None, c2_payload),
        timed(3, "physical model golden values", secs(1), c3_physical),
        timed(4, "TCAD cardinality and conjecture cost", None, c4_tcad),
        timed(5, "gradient correctness", secs(30), c5_gradients),
        timed(6, "operator contraction", secs(30), c6_contraction),
        timed(7, "fixed point and sampled updates", secs(60), c7_fixed_point),
        timed(8, "equilibrium selection", secs(5), c8_equilibrium),
        timed(9, "conjecture error bound", secs(10), c9_bound),
        timed(10, "hypervolume correctness", secs(60), c10_hvi),
        timed(11, "action-share overhead", None, c11_action_share),
        timed(14, "expectile equivalence at tau = 0.5", None, c14_expectile_equivalence),
    ];
    let start = Instant::now();
    let pac = catch_unwind(|| runs(PolicySpec::Pac));
    let pac_time = start.elapsed();
    passed.push(timed(12, "learning signal", secs(20 * 60), || match &pac {
        Ok(p) => {
            let mut o = c12_learning(p);
            o.passed &= pac_time <= Duration::from_secs(20 * 60);
            o.detail.push_str(&format!("; 5 pac runs took {:.0} s", pac_time.as_secs_f64()));
            o
        }
        Err(_) => outcome(false, "pac runs panicked"),
    }));
    passed.push(timed(13, "conjecture benefit", secs(45 * 60), || {
        let Ok(pac) = &pac else {
            return outcome(false, "pac runs panicked");
        };
        let independent = runs(PolicySpec::IndependentAc);
        let generated = runs(PolicySpec::PacP);
        let total = start.elapsed();
        let mut o = c13_conjecture(pac, &independent, &generated);
        o.passed &= total <= Duration::from_secs(45 * 60);
        o.detail.push_str(&format!("; all learning runs took {:.0} s", total.as_secs_f64()));
        o
    }));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
