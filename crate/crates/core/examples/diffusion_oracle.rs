//! Checks the forward marginal, the score loss and both reverse samplers
//! against closed-form Gaussian answers.
//!
//! `cargo run --example diffusion_oracle [-- N_PATHS]`

use emodiff::config::RunConfig;
use emodiff::diffusion::DiffusionSchedule;
use emodiff::evaluation::diffusion_oracle_report;

fn main() -> emodiff::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let cfg = RunConfig::toy();
    let schedule = DiffusionSchedule::from_config(&cfg.schedule)?;
    let r = diffusion_oracle_report(&schedule, n, cfg.train.seed)?;

    let f = &r.forward_vs_simulation;
    println!("forward marginal vs Euler-Maruyama at t=0.5 ({n} paths)");
    println!("  mean {:.4} expected {:.4}   var {:.4} expected {:.4}", f.observed_mean, f.expected_mean, f.observed_var, f.expected_var);
    println!("closed-form marginal at t=1: mean err {:.4} sd, var rel err {:.4}", r.forward_t1_mean_err_sd, r.forward_t1_var_rel_err);
    println!("score loss with the exact score: {:.3e}", r.true_score_loss);
    for (name, m) in [("reverse ODE", &r.ode), ("reverse SDE", &r.sde)] {
        println!("{name}: mean {:.4} var {:.4} (target 2, 0.25)", m.observed_mean, m.observed_var);
    }
    Ok(())
}
