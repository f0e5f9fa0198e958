use gsdyn_core::geom::Vec3;
use gsdyn_core::metrics::chamfer;
use gsdyn_core::synth::load_dataset;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or("/tmp/c6probe/dense20/data".into());
    let ds = load_dataset(std::path::Path::new(&dir)).unwrap();
    let horizon = 10;
    let stride = 4;
    // Sums per horizon: static baseline, constant-velocity, velocity-decay.
    let mut bs = vec![0.0; horizon];
    let mut cv = vec![0.0; horizon];
    let mut dk = vec![0.0; horizon];
    let mut windows = 0;
    for ep in ds.episodes.iter().skip(15) {
        let seq = &ep.sequence;
        let frames = seq.positions.len();
        let mut t = 3;
        while t + horizon <= frames - 1 {
            let grasped = (t..=t + horizon).all(|f| seq.grasp_mask[f].iter().any(|&g| g));
            if grasped {
                let x0 = &seq.positions[t];
                let v: Vec<Vec3> = x0
                    .iter()
                    .zip(&seq.positions[t - 1])
                    .map(|(a, b)| *a - *b)
                    .collect();
                for h in 1..=horizon {
                    let truth = &seq.positions[t + h];
                    bs[h - 1] += chamfer(x0, truth).unwrap();
                    let pred_cv: Vec<Vec3> =
                        x0.iter().zip(&v).map(|(p, vi)| *p + *vi * h as f64).collect();
                    cv[h - 1] += chamfer(&pred_cv, truth).unwrap();
                    // Geometric decay 0.7^j models drag toward rest.
                    let gain: f64 = (1..=h).map(|j| 0.7f64.powi(j as i32 - 1)).sum();
                    let pred_dk: Vec<Vec3> =
                        x0.iter().zip(&v).map(|(p, vi)| *p + *vi * gain).collect();
                    dk[h - 1] += chamfer(&pred_dk, truth).unwrap();
                }
                windows += 1;
            }
            t += stride;
        }
    }
    print!("drag windows {windows}\nconst-vel ratios:");
    for h in 0..horizon {
        print!(" {:.2}", cv[h] / bs[h]);
    }
    print!("\ndecay-vel ratios:");
    for h in 0..horizon {
        print!(" {:.2}", dk[h] / bs[h]);
    }
    println!();
}
