//! Measures the same-distribution noise floors behind the committed
//! thresholds in `flowlab::harness::floors`, plus the headline statistical
//! experiments. Run before touching any committed constant:
//!
//! ```bash
//! cargo run --release --example calibrate
//! ```

use flowlab::harness;

fn stats(name: &str, v: &[f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("{name}: mean {mean:.6e}  min {min:.6e}  max {max:.6e}  (n={})", v.len());
}

fn main() -> flowlab::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "floors".to_string());
    match which.as_str() {
        "floors" => floors()?,
        "transport" => transport()?,
        "correction" => correction()?,
        "distill" => distill()?,
        "reflow" => reflow()?,
        "ewc" => ewc()?,
        "pipeline" => pipeline()?,
        "all" => {
            floors()?;
            transport()?;
            correction()?;
            distill()?;
            reflow()?;
            ewc()?;
            pipeline()?;
        }
        other => eprintln!("unknown calibration target {other}"),
    }
    Ok(())
}

fn floors() -> flowlab::Result<()> {
    println!("== same-distribution noise floors ==");
    let (sw, mm, tf) = harness::measure_floors(20)?;
    stats("sliced-W2 (gmm2, n=2000, 128 proj)", &sw);
    stats("mmd2 (gmm2, n=1000, median-heuristic)", &mm);
    stats("toy_fid (gmm2, n=5000, seed 7)", &tf);
    let pf = harness::measure_phantom_fid_floor(10, 8)?;
    stats("toy_fid (8x8 phantoms, n=48)", &pf);
    println!(
        "committed: SW2 {} | MMD2 {} | TOY_FID {} | TOY_FID_PHANTOM {}",
        harness::floors::SW2_GMM2_N2000,
        harness::floors::MMD2_GMM2_N1000,
        harness::floors::TOY_FID_N5000,
        harness::floors::TOY_FID_PHANTOM_N48,
    );
    Ok(())
}

fn transport() -> flowlab::Result<()> {
    println!("== transport quality (criterion: sw2 <= 3x floor) ==");
    let o = harness::transport_quality(42)?;
    println!("sw2 {:.4}  bound {:.4}  train {:.1}s", o.sw2, o.bound, o.train_secs);
    Ok(())
}

fn correction() -> flowlab::Result<()> {
    println!("== correction benefit over committed seeds ==");
    let (wins, outcomes) = harness::correction_benefit()?;
    for o in &outcomes {
        println!(
            "seed {}: corrected {:.5}  uncorrected {:.5}  {}",
            o.seed,
            o.corrected_mmd2,
            o.uncorrected_mmd2,
            if o.corrected_mmd2 < o.uncorrected_mmd2 { "WIN" } else { "loss" }
        );
    }
    println!("wins: {wins}/10");
    Ok(())
}

fn distill() -> flowlab::Result<()> {
    println!("== step reduction over committed seeds ==");
    let mut quality = 0;
    let mut speed = 0;
    for &seed in &harness::seeds::DISTILL {
        let o = harness::step_reduction_seed(seed)?;
        let q = o.quality_ok();
        if q {
            quality += 1;
        }
        if o.wall_ratio >= 8.0 {
            speed += 1;
        }
        println!(
            "seed {}: teacher {:.6} student {:.6} ratio {:.1} nfe {}/{} {}",
            o.seed,
            o.teacher_mmd2,
            o.student_mmd2,
            o.wall_ratio,
            o.teacher_report.evaluations,
            o.student_report.evaluations,
            if q { "OK" } else { "MISS" }
        );
    }
    println!("quality {quality}/10, speed {speed}/10");
    Ok(())
}

fn reflow() -> flowlab::Result<()> {
    println!("== reflow straightening over committed seeds ==");
    let mut wins = 0;
    for &seed in &harness::seeds::REFLOW {
        let (before, after) = harness::reflow_seed(seed)?;
        if after <= before {
            wins += 1;
        }
        println!("seed {seed}: before {before:.4} after {after:.4}");
    }
    println!("non-increasing: {wins}/10");
    Ok(())
}

fn ewc() -> flowlab::Result<()> {
    println!("== EWC anchoring over committed seeds ==");
    let mut ok = 0;
    for &seed in &harness::seeds::EWC {
        let o = harness::ewc_anchoring_seed(seed)?;
        let pass = o.drift_with_penalty <= 0.2 && o.drift_without_penalty > 0.2;
        if pass {
            ok += 1;
        }
        println!(
            "seed {seed}: with {:.3} without {:.3} {}",
            o.drift_with_penalty,
            o.drift_without_penalty,
            if pass { "OK" } else { "MISS" }
        );
    }
    println!("anchored: {ok}/10");
    Ok(())
}

fn pipeline() -> flowlab::Result<()> {
    println!("== severity-phantom pipeline probes ==");
    let mut cfg = harness::PipelineConfig::default();
    for &seed in &harness::seeds::CONDGEN[..3] {
        let o = harness::phantom_pipeline(seed, &cfg)?;
        println!(
            "seed {seed}: fid {:.3} mmd {:.5} severe_iou {:.3} var severe {:.5} none {:.5}",
            o.toy_fid, o.mmd2, o.severe_iou, o.organ_var_severe, o.organ_var_none
        );
    }
    println!("-- loss combos (seed 601) --");
    for combo in harness::LossCombo::ALL {
        cfg.losses = combo;
        let o = harness::phantom_pipeline(601, &cfg)?;
        println!("{combo:?}: fid {:.3} mmd {:.5}", o.toy_fid, o.mmd2);
    }
    cfg.losses = harness::LossCombo::All;
    println!("-- ranks (seed 601) --");
    for rank in [8usize, 64] {
        cfg.rank = rank;
        let o = harness::phantom_pipeline(601, &cfg)?;
        println!("rank {rank}: fid {:.3} mmd {:.5}", o.toy_fid, o.mmd2);
    }
    Ok(())
}
