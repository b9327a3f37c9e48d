// Scratch: geometry of the oscillating engine model at delta = -1.2.
use orbitcert::simlab::{detect_limit_cycle, CycleOutcome, DetectSettings};
use orbitcert::sysmodel::builtin;
use std::collections::BTreeMap;

fn main() {
    let sys = builtin("moore_greitzer").unwrap();
    let mut vals = BTreeMap::new();
    vals.insert("delta".to_string(), -1.2);
    let sys = sys.bind_parameters(&vals).unwrap();
    let out = detect_limit_cycle(&sys, &[1.0, 1.0], &DetectSettings::default()).unwrap();
    let orbit = match out {
        CycleOutcome::Cycle(o) => o,
        other => panic!("no cycle: {:?}", other.label()),
    };
    println!("period {}", orbit.period);
    let mut fmin: f64 = f64::INFINITY;
    let mut fmax: f64 = 0.0;
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (1e9f64, -1e9f64, 1e9f64, -1e9f64);
    for s in &orbit.samples {
        let f = sys.eval_f(s).unwrap();
        let fn2 = f[0] * f[0] + f[1] * f[1];
        fmin = fmin.min(fn2);
        fmax = fmax.max(fn2);
        xlo = xlo.min(s[0]);
        xhi = xhi.max(s[0]);
        ylo = ylo.min(s[1]);
        yhi = yhi.max(s[1]);
    }
    println!("|f|^2 along cycle: min {fmin} max {fmax}");
    println!("cycle box: phi [{xlo}, {xhi}] psi [{ylo}, {yhi}]");

    // divergence integral along the cycle: the transverse Floquet exponent
    let mut div_int = 0.0;
    let a = sys.jacobian();
    for (i, s) in orbit.samples.iter().enumerate() {
        let am = a.eval(s).unwrap();
        let div = am[(0, 0)] + am[(1, 1)];
        let dt = orbit.period / orbit.samples.len() as f64;
        let _ = i;
        div_int += div * dt;
    }
    println!(
        "cycle divergence integral {div_int} (transverse exponent per period), rate {}",
        div_int / orbit.period
    );

    // identity-metric transverse margin sweep: p'(A+A')p for p normal to f
    let mut worst = f64::NEG_INFINITY;
    let mut worst_x = (0.0, 0.0);
    for i in -40..=40 {
        for j in -40..=40 {
            let x = [i as f64 * 0.25, j as f64 * 0.25];
            if x[0] * x[0] + x[1] * x[1] > 100.0 {
                continue;
            }
            let f = sys.eval_f(&x).unwrap();
            let fn2 = f[0] * f[0] + f[1] * f[1];
            if fn2 < 0.1 {
                continue;
            }
            let am = a.eval(&x).unwrap();
            let p = [-f[1], f[0]];
            let pn = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let p = [p[0] / pn, p[1] / pn];
            let sym = (am.clone() + am.transpose()) * 0.5;
            let m = p[0] * p[0] * sym[(0, 0)] + 2.0 * p[0] * p[1] * sym[(0, 1)] + p[1] * p[1] * sym[(1, 1)];
            if m > worst {
                worst = m;
                worst_x = (x[0], x[1]);
            }
        }
    }
    println!("identity-metric worst transverse 2p'sym(A)p margin: {worst} at {worst_x:?}");
}
