// EMA against EMAN teachers following a frozen student: weights approach
// the student geometrically, and only EMAN also moves the BN statistics.

use mumkit::nnkit::Parameterized;
use mumkit::posenet::{PoseNet, PoseNetConfig};
use mumkit::teacher::{TeacherConfig, TeacherMode, TeacherState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> mumkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = PoseNet::new(PoseNetConfig::default(), &mut rng)?;
    let mut student = PoseNet::new(PoseNetConfig::default(), &mut rng)?;
    student.bns_mut()[0].running_mean.iter_mut().for_each(|m| *m = 0.5);

    for mode in [TeacherMode::Ema, TeacherMode::Eman] {
        let cfg = TeacherConfig { mode, decay: 0.6, average_std: false };
        let mut teacher = TeacherState::init_from_student(&start, cfg)?;
        print!("{mode:>5}:");
        for step in 1..=10 {
            teacher.update(&student)?;
            if step % 3 == 1 {
                let w = gap(teacher.network().params()[0], student.params()[0]);
                let bn = gap(&teacher.network().bns()[0].running_mean, &student.bns()[0].running_mean);
                print!("  t={step} weight gap {w:.2e} bn-mean gap {bn:.2e}");
            }
        }
        println!();
    }
    Ok(())
}
