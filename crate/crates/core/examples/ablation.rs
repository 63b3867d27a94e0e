//! Runs the six augmentation/gate cells on one simulated stream and prints
//! their final-window metrics.
//!
//! Usage: cargo run --release --example ablation -- [config.json]

use std::time::Instant;

use omnidistill::config::RunConfig;
use omnidistill::distill::{run_replay, EngineOptions};
use omnidistill::experiment::{ablation_specs, summarize, SimSource};

fn main() -> omnidistill::Result<()> {
    env_logger::init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let start = Instant::now();
    let mut source = SimSource::new(&cfg)?;
    let setup = source.setup()?;
    let outs = run_replay(&mut source, &setup, &cfg, ablation_specs(&cfg), &EngineOptions::default())?;
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    for out in &outs {
        let s = summarize(out, &setup.partition, &cfg.eval, cfg.sim.duration);
        let f = |v: Option<f64>| v.map_or("  -  ".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<20} overall {} overlap {} outside {} | raw outside {} | swaps {} | outside dets {} gt {} | count rmse {} | lat max {:.1}ms",
            s.name,
            f(s.final_ap.overall),
            f(s.final_ap.overlap),
            f(s.final_ap.outside),
            f(s.final_ap_raw.outside),
            s.swaps,
            s.raw_outside_detections,
            s.gt_outside,
            f(s.counting_rmse_final),
            s.latency.max * 1e3,
        );
        let tail = cfg.sim.duration - cfg.eval.window;
        let mean = |v: &[(f64, usize)]| {
            let xs: Vec<f64> = v.iter().filter(|p| p.0 >= tail).map(|p| p.1 as f64).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        };
        println!("    final-window mean count {:.2} vs gt {:.2}", mean(&out.counts), mean(&out.gt_counts));
        let o = &s.series_outside;
        if o.len() >= 6 {
            let head = o[..3].iter().map(|p| p.1).sum::<f64>() / 3.0;
            let tail = o[o.len() - 3..].iter().map(|p| p.1).sum::<f64>() / 3.0;
            println!("    outside first3 {head:.3} last3 {tail:.3}");
        }
        let pts = &s.counting.points;
        let third = pts.len() / 3;
        if third > 0 {
            let m = |v: &[(f64, f64, f64)]| v.iter().map(|p| p.2).sum::<f64>() / v.len() as f64;
            println!("    count std first third {:.2} last third {:.2}", m(&pts[..third]), m(&pts[pts.len() - third..]));
        }
        let series: Vec<String> = s.series_outside.iter().map(|(t, ap)| format!("{t:.0}:{ap:.2}")).collect();
        println!("    outside series {}", series.join(" "));
    }
    Ok(())
}
