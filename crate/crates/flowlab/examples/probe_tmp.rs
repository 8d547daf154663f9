use flowlab::harness::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.anchor_mix = [1.0, 0.0, 0.0, 0.0];
    cfg.stage2_phases = vec![(4000, 8e-3)];
    println!("-- loss combos, none-only anchor --");
    for combo in LossCombo::ALL {
        cfg.losses = combo;
        let mut fids = vec![];
        for &seed in &seeds::ABLATION[..3] {
            fids.push(phantom_pipeline(seed, &cfg).unwrap().toy_fid);
        }
        println!("{combo:?}: {:?}", fids.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>());
    }
    cfg.losses = LossCombo::All;
    println!("-- ranks, none-only anchor --");
    for rank in [8usize, 64] {
        cfg.rank = rank;
        let mut fids = vec![];
        for &seed in &seeds::ABLATION[..3] {
            fids.push(phantom_pipeline(seed, &cfg).unwrap().toy_fid);
        }
        println!("rank {rank}: {:?}", fids.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>());
    }
    println!("({:.0}s)", t0.elapsed().as_secs_f64());
}
