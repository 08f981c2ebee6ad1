//! Temporary calibration probe (removed before release).
use selfdpo::simlab::*;

fn mean(v: &[f64]) -> f64 { v.iter().sum::<f64>() / v.len() as f64 }

fn main() {
    let seeds = seed_list(0, 4);
    for sft_epochs in [20usize, 60] {
        for lr in [0.01f64, 0.03] {
            let mut sc = SimScenario::default();
            sc.sft_epochs = sft_epochs;
            sc.config.learning_rate = lr;
            let (mut starts, mut dpo2000, mut dpo250, mut sl2000) = (vec![], vec![], vec![], vec![]);
            for &s in &seeds {
                let (world, policy) = make_world(s, &sc).unwrap();
                starts.push(test_accuracy(&world, &policy));
                let (_, m) = run_dpo_loop_sized(&world, policy.clone(), &sc, 2000, s ^ 1).unwrap();
                dpo2000.push(m.last().unwrap().test_accuracy);
                let (_, m) = run_dpo_loop_sized(&world, policy.clone(), &sc, 250, s ^ 2).unwrap();
                dpo250.push(m.last().unwrap().test_accuracy);
                let (_, m) = run_sl_loop_sized(&world, policy.clone(), &sc, 2000, s ^ 3).unwrap();
                sl2000.push(m.last().unwrap().test_accuracy);
            }
            println!("sft_epochs={sft_epochs:3} lr={lr:.3}: start={:.3} dpo2000={:.3} dpo250={:.3} sl2000={:.3}",
                mean(&starts), mean(&dpo2000), mean(&dpo250), mean(&sl2000));
        }
    }
}
