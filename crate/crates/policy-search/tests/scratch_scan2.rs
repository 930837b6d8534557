use nalgebra::DVector;
use policy_search::env::NonlinearSystem;
use policy_search::estimate::forward_estimate;
use policy_search::optim::{direction, em_step_sampled, DirectionMethod, StepSchedule};
use policy_search::policy::ParamNoiseLinearPolicy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn nonlinear_training_dynamics() {
    for (sigma_r, sigma_eps) in [(10.0, 0.6), (12.0, 0.5), (12.0, 0.6)] {
        println!("### sigma_r = {sigma_r}, sigma_eps = {sigma_eps} (grid w0)");
        for _ in 0..8 {
            training_run(sigma_r, sigma_eps);
        }
    }
    for (sigma_r, sigma_eps) in [(0.0, 0.0)] {
        let _ = (sigma_r, sigma_eps);
        println!("### sigma_r = {sigma_r}, sigma_eps = {sigma_eps}");
        training_run(sigma_r, sigma_eps);
    }
}

static BASE: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

fn training_run(sigma_r: f64, sigma_eps: f64) {
    let base = BASE.fetch_add(1, std::sync::atomic::Ordering::SeqCst) * 777_000 + 31;
    let policy = ParamNoiseLinearPolicy::new(2, sigma_eps);
    let env = NonlinearSystem::benchmark(sigma_r);
    let iterations = 100usize;
    let n_traj = 50u64;
    let mut finals = (Vec::new(), Vec::new());
    for rep in 0..20u64 {
        let _ = ChaCha8Rng::seed_from_u64(base + 900 + rep);
        let w0 = DVector::from_vec(vec![
            6.0 + 12.0 * (rep % 5) as f64,
            -1.0 - 2.0 * ((rep / 5) % 4) as f64,
        ]);
        // EM: unit-step M-step each iteration.
        let mut w_em = w0.clone();
        let mut em_final = 0.0;
        for k in 1..=iterations {
            let seed = base + 1_000_000 + rep * 10_000 + k as u64;
            let rep_est = forward_estimate(&env, &policy, &w_em, n_traj, 1.0, seed).unwrap();
            em_final = rep_est.mean_score;
            w_em = em_step_sampled(&policy, &rep_est, &w_em).unwrap();
        }
        // Approximate Newton with the annealed schedule alpha = 18 -> 1.
        let sched = StepSchedule::EmInterp { alpha: 18.0, total: iterations };
        let mut w_ax = w0.clone();
        let mut ax_final = 0.0;
        for k in 1..=iterations {
            let seed = base + 1_000_000 + rep * 10_000 + k as u64;
            let rep_est = forward_estimate(&env, &policy, &w_ax, n_traj, 1.0, seed).unwrap();
            ax_final = rep_est.mean_score;
            let dir = direction(DirectionMethod::ApxnFull, &rep_est.to_bundle()).unwrap();
            w_ax += dir.d * sched.step_size(k).unwrap();
        }
        println!(
            "rep {rep}: w0 = ({:>5.1}, {:>5.2})  EM final U = {:>8.3} (w = {:>7.2}, {:>6.2})  ApxN final U = {:>8.3} (w = {:>7.2}, {:>6.2})",
            w0[0], w0[1], em_final, w_em[0], w_em[1], ax_final, w_ax[0], w_ax[1]
        );
        finals.0.push(em_final);
        finals.1.push(ax_final);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0) / v.len() as f64).sqrt()
    };
    let pooled = (se(&finals.0).powi(2) + se(&finals.1).powi(2)).sqrt();
    println!(
        "EM mean final {:.3} (se {:.3})   ApxN mean final {:.3} (se {:.3})   margin/pooledSE = {:.2}",
        mean(&finals.0), se(&finals.0), mean(&finals.1), se(&finals.1),
        (mean(&finals.1) - mean(&finals.0)) / pooled
    );
}
