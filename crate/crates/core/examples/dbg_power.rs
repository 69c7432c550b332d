use jtnoma::channel::{generate_instance, ChannelModelParams};
use jtnoma::model::{NetworkConfig, PowerAllocation, Schedule, ServiceKind};
use jtnoma::power::{solve_power, PowerSolveConfig};

fn main() {
    let cfg = NetworkConfig::with_dims(ServiceKind::Web, 1, 1, 1, 1, 42);
    let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
    let sigma = inst.config.noise_power[0];
    inst.gain_sbs_sut[0] = 31.0 * sigma / inst.config.p_max[0];
    inst.gain_mbs_put[0] = 1e3 * sigma / inst.config.q_max;
    inst.gain_sbs_put[0] = 1e-6 * sigma / inst.config.p_max[0];
    inst.gain_mbs_sut[0] = 1e-3 * sigma / inst.config.q_max;
    let mut sched = Schedule::zeros(1, 1, 1);
    sched.set_theta(0, 0, 1.0);
    sched.set_eps(0, 0, 0, 1.0);
    sched.sync_chi();
    let start = PowerAllocation::uniform_init(&inst);
    let (pw, report) = solve_power(&inst, &sched, &start, &PowerSolveConfig::default()).unwrap();
    println!("p = {} (pmax {})", pw.p_at(0, 0, 0), inst.config.p_max[0]);
    println!("q = {}", pw.q_at(0, 0));
    println!("converged {} iters {}", report.converged, report.outer_iters);
    for row in report.trace.iter().take(8) {
        println!("t {} obj {} viol {} alpha {}", row.t, row.objective, row.max_violation, row.alpha);
    }
    println!("rate {}", jtnoma::sinr::sut_rate(&inst, &sched, &pw, 0));
}
