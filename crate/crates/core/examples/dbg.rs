use std::time::Instant;
use wlcdma::power_game::*;
use wlcdma::scenario::*;

fn main() {
    let utility = UtilityConfig::default();
    let schedule = GameSchedule::default();
    for k in [11usize, 22, 30] {
        for variant in [GameVariant::PowerReceiverCodesLinear, GameVariant::PowerReceiverCodesWl] {
            let t0 = Instant::now();
            let mut conv = 0; let mut rounds = 0;
            for trial in 0..5u64 {
                let sc_config = ScenarioConfig { users: k, ..ScenarioConfig::default() };
                let sc = generate_scenario(&sc_config, 10_000 + trial).unwrap();
                let codes = generate_codes(11, k, CodeKind::Binary, 20_000 + trial).unwrap();
                let o = run_ee_game(&sc, &codes, variant, &utility, &schedule).unwrap();
                if o.converged { conv += 1; }
                rounds += o.rounds;
            }
            println!("K={k:2} {variant}: conv={conv}/5 mean_rounds={} elapsed {:.2?}", rounds/5, t0.elapsed());
        }
    }
}
