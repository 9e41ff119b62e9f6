//! Learning-rate schedules and the teacher-update events they drive.

use uodlab::schedule::{lr_at, policy_action, LrConfig, PolicyKind, TeacherAction, TeacherPolicy};

fn main() -> uodlab::Result<()> {
    let total = 600;
    let step = LrConfig::step(0.01, vec![400, 550]);
    let cosine = LrConfig::cosine(0.01, 1e-4, 200, 3);
    step.validate()?;
    cosine.validate()?;
    println!("{:>5} {:>10} {:>10}", "iter", "step", "cosine");
    for i in (0..total).step_by(50) {
        println!("{i:>5} {:>10.6} {:>10.6}", lr_at(i, &step), lr_at(i, &cosine));
    }

    for (kind, lr) in [(PolicyKind::Periodic, &cosine), (PolicyKind::Ema, &step)] {
        let policy = TeacherPolicy::of(kind);
        policy.validate(lr)?;
        let events: Vec<(u64, TeacherAction)> = (0..total)
            .map(|i| (i + 1, policy_action(i, &policy, lr, total)))
            .filter(|(_, a)| !matches!(a, TeacherAction::None | TeacherAction::EmaUpdate { recalibrate: false }))
            .collect();
        let ema_updates = (0..total)
            .filter(|&i| matches!(policy_action(i, &policy, lr, total), TeacherAction::EmaUpdate { .. }))
            .count();
        println!("\n{kind:?} teacher events (after step n), plus {ema_updates} EMA updates:");
        for (n, a) in events {
            println!("  {n:>4}: {a:?}");
        }
    }
    Ok(())
}
