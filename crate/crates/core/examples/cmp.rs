use mvp_core::fixtures::toy_corpus;
use mvp_core::grpo::GrpoConfig;
use mvp_core::policy_sim::{train_sim, TrainOptions};
use mvp_core::reward::{RewardConfig, RewardMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kls: Vec<f64> = args[1].split(',').map(|x| x.parse().unwrap()).collect();
    let lrs: Vec<f64> = args[2].split(',').map(|x| x.parse().unwrap()).collect();
    for &kl in &kls {
        for &lr in &lrs {
            let mut wins = 0;
            let mut conv = 0;
            let mut detail = Vec::new();
            for seed in 0..20u64 {
                let corpus = toy_corpus(5, 3, 6, 1000 + seed);
                let g = GrpoConfig { learning_rate: lr, kl_coeff: kl, ..Default::default() };
                let run = |m| train_sim(&corpus, &g, &RewardConfig::<f64>::with_mode(m), 300, seed, &TrainOptions::default()).unwrap();
                let c = run(RewardMode::ContentPlusSequence);
                let e = run(RewardMode::ExactOnly);
                let sc = c.steps_to_threshold(2.7);
                let se = e.steps_to_threshold(2.7);
                if c.log.last().unwrap().expected_r_correct >= 2.7 { conv += 1; }
                if sc.unwrap_or(usize::MAX) <= se.unwrap_or(usize::MAX) && sc.is_some() { wins += 1; }
                detail.push(format!("{:?}/{:?}", sc, se));
            }
            println!("kl {kl} lr {lr}: conv {conv}/20 cps<=exact {wins}/20  {}", detail.join(" "));
        }
    }
}
