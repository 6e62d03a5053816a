use ipwd::config::{preset, DataSource};
use ipwd::data::SyntheticSpec;
use ipwd::mathcore::softmax;
use ipwd::metrics::teacher_profile;
use ipwd::trainer::{train_teacher, resolve_dataset, evaluate};

fn main() {
    let a: Vec<f64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let (noise, cs, ctx, wd, ramp, growth, tau) = (a[0], a[1], a[2], a[3], a[4], a[5], a[6]);
    let seed = 1u64;
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
    // mean own-class softened prob at tau
    let mut p_own = 0.0;
    for i in 0..train.len() {
        let s = train.sample(i);
        let out = teacher.net.forward(&s.features).unwrap();
        let p = softmax(&out.z_kd, tau).unwrap();
        p_own += p.values()[s.label.index()];
    }
    p_own /= train.len() as f64;
    let prof = teacher_profile(&teacher.net, &train, &[tau]).unwrap();
    let c = &prof.curves[0];
    println!("tr {:.3} te {:.3} | p_own@tau{} = {:.3} | ratio {:.2}", m.top1, teacher.report.top1, tau, p_own, c.imbalance_ratio);
    println!("curve: {:?}", c.sorted_mean_probs.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    println!("order: {:?}", c.class_order);
}
