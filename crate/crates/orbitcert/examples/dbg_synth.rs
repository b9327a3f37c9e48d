// Scratch: exercise synthesis configurations from the command line.
// Usage: dbg_synth <mode> <delta> <radius> <degw> <degrho> <lambda> <samples> <grid> [fmin2]
use orbitcert::certcheck::{CertMode, GridSpec, VerifySettings};
use orbitcert::synth::*;
use orbitcert::sysmodel::builtin;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = if args[1] == "strong" { CertMode::Strong } else { CertMode::Transverse };
    let delta: f64 = args[2].parse().unwrap();
    let radius: f64 = args[3].parse().unwrap();
    let degw: u32 = args[4].parse().unwrap();
    let degrho: u32 = args[5].parse().unwrap();
    let lambda: f64 = args[6].parse().unwrap();
    let nsamples: usize = args[7].parse().unwrap();
    let grid: usize = args[8].parse().unwrap();
    let fmin2: Option<f64> = args.get(9).map(|s| s.parse().unwrap());
    let eps_pd: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let sys = builtin("moore_greitzer").unwrap();
    let mut vals = BTreeMap::new();
    vals.insert("delta".to_string(), delta);
    let sys = with_ball_region(&sys.bind_parameters(&vals).unwrap(), radius, fmin2);
    let ansatz = MetricAnsatz::new(degw, degrho);
    let t0 = Instant::now();
    let samples = sample_region(&sys.region, nsamples, 2, SampleStrategy::UniformRejection).unwrap();
    let refine = RefineSettings::new(GridSpec::PerAxis(grid));
    let (out, report) = synthesize_with_refinement(
        &sys, &ansatz, &samples, lambda, eps_pd, mode, &SynthOptions::default(), &refine,
    ).unwrap();
    println!("synthesis took {:.1?}", t0.elapsed());
    match out {
        SynthOutcome::Success(s) => {
            println!("sampled margin: {} (iters {})", s.sampled_margin, s.iterations);
            let rep = report.unwrap();
            println!(
                "grid({}) pass {} worst {} at {:?} (w_margin {} min_rho {:?} fail {}/{})",
                grid, rep.pass, rep.worst_margin, rep.worst_point, rep.worst_w_margin,
                rep.min_rho, rep.fail_count, rep.total_points
            );
        }
        SynthOutcome::Failure(f) => {
            println!(
                "FAIL status {:?} best {} at {:?} kind {}",
                f.status, f.best_margin, f.blocking_sample, f.blocking_kind
            );
        }
    }
}
