use nalgebra::DVector;
use policy_search::env::{TetrisActionSpace, TetrisSim};
use policy_search::estimate::recurrent_estimate_episodes;
use policy_search::model::SampledEnv;
use policy_search::optim::{
    direction, line_search, DirectionMethod, DEFAULT_LINE_SEARCH_CANDIDATES,
};
use policy_search::policy::{GibbsPolicy, PolicyModel};

fn play_game(
    sim: &TetrisSim,
    policy: &GibbsPolicy<TetrisActionSpace>,
    w: &DVector<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let mut state = sim.reset(rng);
    let mut total = 0.0;
    loop {
        let action = policy.sample(&state, w, rng).unwrap();
        let (next, reward) = sim.step(&state, &action, rng);
        total += reward;
        state = next;
        if sim.at_recurrent_state(&state) {
            return total;
        }
    }
}

#[test]
#[ignore]
fn tetris_training_dynamics() {
    for method in [
        DirectionMethod::ApxnFull,
        DirectionMethod::ApxnDiag,
        DirectionMethod::Steepest,
    ] {
        let start = std::time::Instant::now();
        let sim = TetrisSim::new(10, 10);
        let policy = GibbsPolicy::new(TetrisActionSpace::new(sim.clone()));
        let mut w = DVector::zeros(21);
        let mut scores = Vec::new();
        for k in 1..=30u64 {
            let seed = 5000 + k;
            let report = recurrent_estimate_episodes(&sim, &policy, &w, 200, seed).unwrap();
            scores.push(report.mean_score);
            let dir = direction(method, &report.to_bundle()).unwrap();
            let norm = dir.d.norm();
            if norm == 0.0 {
                continue;
            }
            let unit = dir.d / norm;
            let (alpha, _) = line_search(
                &w,
                &unit,
                &DEFAULT_LINE_SEARCH_CANDIDATES,
                200,
                90_000 + k,
                |wc, rng| play_game(&sim, &policy, wc, rng),
            );
            w += unit * alpha;
        }
        println!(
            "{method:?}: scores {:?} elapsed {:.1}s",
            scores.iter().map(|s| (s * 10.0).round() / 10.0).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        );
    }
}
