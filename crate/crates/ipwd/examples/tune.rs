// Exploration harness for the synthetic preset (not part of the deliverable).
use ipwd::config::{preset, DataSource};
use ipwd::data::SyntheticSpec;
use ipwd::metrics::{group_recall, teacher_profile, Grouping};
use ipwd::trainer::{distill_two_stage, evaluate, resolve_dataset, train_teacher};

fn main() {
    let seeds: Vec<u64> = (1..=10).collect();
    let mut rare_w_wins = 0;
    let mut rare_recall_ipwd = 0.0;
    let mut rare_recall_kd = 0.0;
    let mut head_recall_ipwd = 0.0;
    let mut head_recall_kd = 0.0;
    let mut ratios = Vec::new();
    let mut t_accs = Vec::new();
    let mut kd_accs = Vec::new();
    let mut ipwd_accs = Vec::new();

    for &seed in &seeds {
        let tmp = tempfile::tempdir().unwrap();
        let mut tcfg = preset("synthetic-teacher").unwrap();
        tcfg.seed = seed;
        if let DataSource::Synthetic(ref mut s) = tcfg.dataset {
            s.seed = seed;
        }
        let tdir = tmp.path().join("teacher");
        let teacher = train_teacher(&tcfg, &tdir).unwrap();
        let (train, test) = resolve_dataset(&tcfg.dataset).unwrap();
        t_accs.push(teacher.report.top1);

        // Teacher profile on the train set at several temperatures.
        let prof = teacher_profile(&teacher.net, &train, &[1.0, 2.0, 4.0, 10.0]).unwrap();
        if seed == 1 {
            for c in &prof.curves {
                println!(
                    "tau {:>5}: ratio {:8.3} curve {:?}",
                    c.tau,
                    c.imbalance_ratio,
                    c.sorted_mean_probs
                        .iter()
                        .map(|v| (v * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>()
                );
            }
        }
        ratios.push(prof.curves[1].imbalance_ratio); // tau = 2

        let mut kcfg = preset("synthetic-kd").unwrap();
        kcfg.seed = seed + 1000;
        kcfg.dataset = tcfg.dataset.clone();
        let kd = distill_two_stage(&kcfg, &teacher.checkpoint, &tmp.path().join("kd")).unwrap();

        let mut icfg = preset("synthetic-ipwd").unwrap();
        icfg.seed = seed + 1000;
        icfg.dataset = tcfg.dataset.clone();
        let ipwd =
            distill_two_stage(&icfg, &teacher.checkpoint, &tmp.path().join("ipwd")).unwrap();

        kd_accs.push(kd.report.top1);
        ipwd_accs.push(ipwd.report.top1);

        // Rare vs head context weights.
        let cw = ipwd.context_weight_means.as_ref().unwrap();
        let w_head = cw.iter().find(|(c, _)| *c == 0).unwrap().1;
        let w_rare = cw.iter().find(|(c, _)| *c == 2).unwrap().1;
        if w_rare > w_head {
            rare_w_wins += 1;
        }

        let g_kd = group_recall(&kd.dump, &Grouping::Context, None).unwrap();
        let g_ipwd = group_recall(&ipwd.dump, &Grouping::Context, None).unwrap();
        rare_recall_kd += g_kd.groups.last().unwrap().recall;
        rare_recall_ipwd += g_ipwd.groups.last().unwrap().recall;
        head_recall_kd += g_kd.groups[0].recall;
        head_recall_ipwd += g_ipwd.groups[0].recall;
        println!(
            "seed {seed}: teacher {:.3} kd {:.3} ipwd {:.3} | w_head {:.3} w_rare {:.3} | rare recall kd {:.3} ipwd {:.3} | maxw {:.1}",
            teacher.report.top1,
            kd.report.top1,
            ipwd.report.top1,
            w_head,
            w_rare,
            g_kd.groups.last().unwrap().recall,
            g_ipwd.groups.last().unwrap().recall,
            ipwd.max_weight_seen,
        );
        let _ = test;
    }
    let n = seeds.len() as f64;
    println!("\nteacher acc mean {:.3}", t_accs.iter().sum::<f64>() / n);
    println!("kd acc mean      {:.3}", kd_accs.iter().sum::<f64>() / n);
    println!("ipwd acc mean    {:.3}", ipwd_accs.iter().sum::<f64>() / n);
    println!("profile ratio at tau=2: min {:.2}", ratios.iter().cloned().fold(f64::INFINITY, f64::min));
    println!("rare-weight wins: {rare_w_wins}/{}", seeds.len());
    println!(
        "rare recall: kd {:.4} ipwd {:.4} (delta {:+.4})",
        rare_recall_kd / n,
        rare_recall_ipwd / n,
        (rare_recall_ipwd - rare_recall_kd) / n
    );
    println!(
        "head recall: kd {:.4} ipwd {:.4} (delta {:+.4})",
        head_recall_kd / n,
        head_recall_ipwd / n,
        (head_recall_ipwd - head_recall_kd) / n
    );
}
