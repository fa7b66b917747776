use crashcert::certifier::*;
use crashcert::data::{synth_dataset, SynthKind, SynthSpec};
use crashcert::injection::CrashModel;
use crashcert::network::LossKind;
use crashcert::regularizer::RegWeights;

fn main() {
    let t0 = std::time::Instant::now();
    let ds = synth_dataset(&SynthSpec { kind: SynthKind::Smooth1d, n_samples: 64, noise: 0.02, seed: 40 }).unwrap();
    let cfg = CertifyConfig {
        epsilon: 9e-3,
        delta_prime: 1e-5,
        complexity_c: 60.0,
        initial_widths: vec![8],
        p: vec![0.0, 1e-3, 0.0],
        max_iterations: 50,
        width_increment: 24,
        mu_multiplier: 10.0,
        psi_multiplier: 2.0,
        lambda_multiplier: 2.0,
        alpha: Some(0.05),
        initial_reg: RegWeights { mu: 1e-6, lambda: 0.05, psi_deriv: 3e-4, psi_smooth: 3e-3, ..Default::default() },
        train: TrainSettings { epochs: 150, batch_size: 16, learning_rate: 0.5, seed: 41 },
    };
    let (result, net) = certify(&ds, LossKind::BoundedMse, &cfg).unwrap();
    println!("status {:?} in {} iterations ({:?})", result.status, result.iterations.len(), t0.elapsed());
    for it in &result.iterations {
        println!("  it {} widths {:?} q={:.3} d0={:?} r3={:?} mean={:?} var={:?} delta={:?} -> {:?}",
            it.iteration, it.widths, it.q_min,
            it.delta0.map(|v| format!("{v:.3}")), it.r3.map(|v| format!("{v:.1}")),
            it.mean.map(|v| format!("{v:.2e}")), it.variance.map(|v| format!("{v:.2e}")),
            it.delta.map(|v| format!("{v:.3}")), it.action);
    }
    if let Some(cert) = &result.certificate {
        println!("certificate: delta={:.4} t={:.4e} mean={:.3e} var={:.3e} delta0={:.3e} R={:?}",
            cert.delta, cert.t, cert.mean, cert.variance, cert.delta0, result.r);
    }
    if result.status == CertifyStatus::Certified {
        let net = net.unwrap();
        let crash = CrashModel::new(cfg.p.clone()).unwrap();
        let t1 = std::time::Instant::now();
        let report = replicate_and_validate(&result, &net, &ds, &crash, LossKind::BoundedMse, 50_000, 99, 0).unwrap();
        println!("validation ({:?}): passed={} threshold={:.1e}", t1.elapsed(), report.passed, report.threshold);
        for (r, est) in &report.per_r {
            println!("  R={r:2} freq={:.3e} (fail {}/{}) upper_ci={:.3e}", est.freq, est.failures, est.trials, est.upper_ci(1.96));
        }
    }
}
