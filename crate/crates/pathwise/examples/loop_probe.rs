use pathwise::control::{place_poles_real, ControllerSpec, Family, Task};
use pathwise::models::{cosine_reference, example_normal_form, example_system};
use pathwise::simulate::{generate_path, integrate, CoordinateMode, Scenario};
use rayon::prelude::*;
use std::sync::Arc;

fn main() {
    let sys = Arc::new(example_system::<f64>());
    let nf = Arc::new(example_normal_form::<f64>());
    let reference = cosine_reference(0.1, 0.01, 5.0, 2);
    let poles = place_poles_real::<f64>(&[-3.0, -4.0]).unwrap();

    let dt: f64 = 5e-6;
    let t_final = 6.0;
    let n = (t_final / dt).round() as usize;

    let mk = |family: Family<f64>, seed: u64| Scenario {
        system: sys.clone(),
        normal_form: Some(nf.clone()),
        mode: CoordinateMode::NormalForm,
        controller: Some(ControllerSpec { family, task: Task::Track, poles: poles.clone() }),
        reference: Some(reference.clone()),
        dt,
        t_final,
        seed,
        initial_state: vec![0.0; 3],
        record_stride: 8,
    };

    let tail_rms = |tr: &pathwise::simulate::HybridTrajectory<f64>| {
        let pts: Vec<f64> = tr.samples.iter().filter(|s| s.t >= t_final / 2.0).map(|s| (s.y - s.y_ref).powi(2)).collect();
        (pts.iter().sum::<f64>() / pts.len() as f64).sqrt()
    };

    let seeds: Vec<u64> = (1..=24).collect();
    let rows: Vec<String> = seeds.par_iter().map(|&seed| {
        let path = generate_path::<f64>(seed, dt, n);
        let zn = match integrate(&mk(Family::ZeroNoise, seed), &path) {
            Ok(t) => t,
            Err(e) => return format!("seed {seed}: zero-noise ABORT ({e})"),
        };
        let ideal = match integrate(&mk(Family::Idealistic, seed), &path) {
            Ok(t) => t, Err(e) => return format!("seed {seed}: idealistic ABORT ({e})"),
        };
        let mut d = Vec::new();
        let mut rms = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            match integrate(&mk(Family::Hybrid { epsilon: eps, delta_threshold: 1e-6 }, seed), &path) {
                Ok(hb) => {
                    d.push(ideal.samples.iter().zip(&hb.samples).map(|(a, b)| (a.state[1] - b.state[1]).abs()).fold(0.0f64, f64::max));
                    rms.push(tail_rms(&hb));
                }
                Err(e) => return format!("seed {seed}: hybrid({eps:.0e}) ABORT ({e})"),
            }
        }
        let zn_rms = tail_rms(&zn);
        let ladder_ok = d[0] > d[1] && d[1] > d[2];
        let rms_ok = rms[2] < rms[1] && rms[1] < rms[0] && rms[0] < zn_rms && rms[2] < 0.5 * zn_rms;
        format!("seed {seed}: D=({:.3e},{:.3e},{:.3e}) ladder={} rms=({:.3e},{:.3e},{:.3e}) zn={:.3e} rmsOK={}",
            d[0], d[1], d[2], ladder_ok, rms[0], rms[1], rms[2], zn_rms, rms_ok)
    }).collect();
    for r in rows { println!("{r}"); }
}
