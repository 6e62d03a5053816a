use ipwd::config::{preset, DataSource};
use ipwd::data::SyntheticSpec;
use ipwd::metrics::teacher_profile;
use ipwd::trainer::{train_teacher, resolve_dataset, evaluate};

fn main() {
    let a: Vec<f64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let (noise, cs, ctx, wd, ramp, growth) = (a[0], a[1], a[2], a[3], a[4], a[5]);
    for seed in 1..=2u64 {
        let tmp = tempfile::tempdir().unwrap();
        let mut tcfg = preset("synthetic-teacher").unwrap();
        tcfg.seed = seed;
        tcfg.optimizer.learning_rate = 0.01;
        tcfg.optimizer.weight_decay = wd;
        tcfg.dataset = DataSource::Synthetic(SyntheticSpec {
            noise_std: noise, class_separation: cs, context_separation: ctx,
            class_radius_ramp: ramp, context_radius_growth: growth,
            seed, ..SyntheticSpec::default()
        });
        let teacher = train_teacher(&tcfg, &tmp.path().join("t")).unwrap();
        let (train, _) = resolve_dataset(&tcfg.dataset).unwrap();
        let (m, _) = evaluate(&teacher.net, &train, &tcfg.eval).unwrap();
        let taus = [1.0, 2.0, 3.0, 4.0, 6.0];
        let prof = teacher_profile(&teacher.net, &train, &taus).unwrap();
        let rs: Vec<String> = prof.curves.iter().map(|c| format!("{:.2}@{}", c.imbalance_ratio, c.tau)).collect();
        println!("n{noise} cs{cs} cx{ctx} wd{wd} rp{ramp} g{growth} s{seed}: tr {:.3} te {:.3} | {}",
            m.top1, teacher.report.top1, rs.join(" "));
    }
}
