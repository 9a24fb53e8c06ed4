//! Self-contained verification routines behind the check subcommands.

use anyhow::Result;
use mcofl::agent::{critic_step, expectile_grad, expectile_loss};
use mcofl::conjgen::{kl_bound_check, softened_argmax};
use mcofl::metrics::{hypervolume_exact, hypervolume_mc};
use mcofl::neural::{gradient_check, relative_error, Mlp, Optimizer};
use mcofl::rng_stream;
use mcofl::tabular::{
    contraction_probe, greedy_joint, iterate_to_fixed_point, penalty_game, run_async, team_game, two_state_game, Operator,
    QTableJoint, Variant,
};
use rand::Rng as _;

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

pub fn tabular(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let game = two_state_game(0.9);
    let mut rng = rng_stream(seed, "contraction");
    let ops = [
        ("pareto literal", Operator::Pareto(Variant::Literal)),
        ("pareto joint_max", Operator::Pareto(Variant::JointMax)),
        ("expectile tau=0.1", Operator::Expectile { variant: Variant::JointMax, tau: 0.1 }),
        ("expectile tau=0.5", Operator::Expectile { variant: Variant::JointMax, tau: 0.5 }),
        ("expectile tau=0.9", Operator::Expectile { variant: Variant::JointMax, tau: 0.9 }),
    ];
    for (label, op) in ops {
        let ratio = contraction_probe(&game, op, 1000, &mut rng)?;
        out.push(check(&format!("contraction {label}"), ratio <= 0.9 + 1e-12, format!("max ratio {ratio:.6}")));
    }

    let team = team_game(0.9);
    let op = Operator::Pareto(Variant::JointMax);
    let fp = iterate_to_fixed_point(&team, op, QTableJoint::zeros(&team), 1e-10, 10_000)?;
    let max_q = fp.q.max_entry();
    out.push(check(
        "team game value iteration",
        (max_q - 100.0).abs() <= 1e-6,
        format!("max Q* = {max_q:.9} after {} iterations", fp.iterations),
    ));
    let q = run_async(&team, op, 100_000, 0.6, &mut rng_stream(seed, "async"))?;
    let err = q.sup_distance(&fp.q);
    out.push(check("team game sampled updates", err <= 1e-2, format!("sup error {err:.2e} after 1e5 updates")));

    let pg = penalty_game(0.9);
    let opt = iterate_to_fixed_point(&pg, op, QTableJoint::zeros(&pg), 1e-10, 10_000)?;
    let pes = iterate_to_fixed_point(&pg, Operator::Pessimistic, QTableJoint::zeros(&pg), 1e-10, 10_000)?;
    let a = greedy_joint(&opt.q, op, 0);
    let b = greedy_joint(&pes.q, Operator::Pessimistic, 0);
    out.push(check(
        "penalty game selection",
        a == [0, 0] && b == [2, 2],
        format!("optimistic {a:?}, pessimistic {b:?}"),
    ));
    Ok(out)
}

pub fn bound(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_stream(seed, "bound");
    let mut held = 0;
    let mut worst_margin = f64::INFINITY;
    let trials = 1000;
    for _ in 0..trials {
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
        let range = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - q.iter().cloned().fold(f64::INFINITY, f64::min);
        let target = softened_argmax(&q, rng.random_range(0.05..2.0));
        let raw: Vec<f64> = (0..3).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let s: f64 = raw.iter().sum();
        let approx: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let b = kl_bound_check(&q, &approx, &target, range)?;
        held += usize::from(b.holds);
        worst_margin = worst_margin.min(b.rhs - b.lhs);
    }
    Ok(vec![check(
        "conjecture error bound",
        held == trials,
        format!("held in {held}/{trials}, smallest margin {worst_margin:.3e}"),
    )])
}

pub fn gradients(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_stream(seed, "gradcheck");
    let net = Mlp::new(&[6, 16, 12, 3], &mut rng)?;
    let x: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let worst = gradient_check(&net, &x, 300, 1e-5, &mut rng)?;
    let mut out = vec![check("network backward", worst <= 1e-5, format!("worst relative error {worst:.2e}"))];

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d: f64 = rng.random_range(-5.0..5.0);
        let tau: f64 = rng.random_range(0.05..0.95);
        if d.abs() < 1e-3 {
            continue;
        }
        let h = 1e-6;
        let num = (expectile_loss(&[d + h], tau) - expectile_loss(&[d - h], tau)) / (2.0 * h);
        worst = worst.max(relative_error(num, expectile_grad(d, tau)));
    }
    out.push(check("expectile loss gradient", worst <= 1e-4, format!("worst relative error {worst:.2e}")));

    // tau = 0.5 expectile steps against plain half-squared-error steps.
    let sizes = [5, 8, 1];
    let mut a = Mlp::new(&sizes, &mut rng_stream(seed, "critic"))?;
    let mut b = a.clone();
    let mut opt_a = Optimizer::adam(a.param_count());
    let mut opt_b = Optimizer::adam(b.param_count());
    let mut data = rng_stream(seed, "critic-data");
    let mut drift = 0.0f64;
    for _ in 0..100 {
        let rows = 8;
        let xs: Vec<f64> = (0..rows * 5).map(|_| data.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..rows).map(|_| data.random_range(-2.0..2.0)).collect();
        critic_step(&mut a, &mut opt_a, &xs, &ys, 0.5, 1e-2)?;
        let pred = b.forward_train(&xs, rows)?;
        let up: Vec<f64> = pred.iter().zip(&ys).map(|(p, y)| (p - y) / rows as f64).collect();
        let (g, _) = b.backward(&up)?;
        opt_b.step(b.params_mut(), &g, 1e-2)?;
        drift = a.params().iter().zip(b.params()).map(|(x, y)| (x - y).abs()).fold(drift, f64::max);
    }
    out.push(check("expectile at tau=0.5 matches squared error", drift <= 1e-9, format!("max parameter gap {drift:.2e}")));
    Ok(out)
}

pub fn hvi(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let v = hypervolume_exact(&[vec![0.3, 0.9], vec![0.9, 0.3]], &[1.1, 1.1])?;
    out.push(check("2D fixture", (v - 0.28).abs() < 1e-12, format!("{v}")));
    let mut rng = rng_stream(seed, "hvi");
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..20 {
        let n = rng.random_range(1..8);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.1)).collect()).collect();
        let exact = hypervolume_exact(&pts, &[1.1; 3])?;
        let est = hypervolume_mc(&pts, &[1.1; 3], 1_000_000, &mut rng);
        let z = if est.std_error > 0.0 { (exact - est.value).abs() / est.std_error } else { 0.0 };
        worst = worst.max(z);
        let mut more = pts.clone();
        more.push(pts[0].iter().map(|x| (x + 0.05).min(1.1)).collect());
        invariant &= (hypervolume_exact(&more, &[1.1; 3])? - exact).abs() < 1e-12;
    }
    out.push(check("3D exact vs Monte Carlo", worst <= 4.0, format!("worst deviation {worst:.2} standard errors")));
    out.push(check("dominated point leaves HVI unchanged", invariant, String::new()));
    Ok(out)
}
