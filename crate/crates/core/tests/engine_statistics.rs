use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttsa_core::problems::quadratic_1d;
use ttsa_core::sde_engine::{integrate, observation_increment};
use ttsa_core::{LearningRateSchedule, NoiseModel, SchedulePair, TtsaConfig, Vector};

fn schedules() -> SchedulePair {
    SchedulePair::new(
        LearningRateSchedule::new(1.0, 1.0, 0.9),
        LearningRateSchedule::new(1.0, 1.0, 0.6),
    )
}

fn draws(noise: &NoiseModel, n: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let prob = quadratic_1d();
    let zero = Vector::zeros(1);
    let s = schedules();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|_| {
            let (a, b) =
                observation_increment(&prob, noise, (&zero, &zero), 1.0, dt, &s, &mut rng).unwrap();
            (a[0], b[0])
        })
        .unzip()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0),
    )
}

#[test]
fn increment_variance_matches_dt() {
    let dt = 0.01;
    let n = 100_000;
    let (a, b) = draws(&NoiseModel::isotropic(1, 1, 1.0, 1.0), n, dt);
    let se = dt * (2.0 / (n - 1) as f64).sqrt();
    for v in [a, b] {
        let (m, var) = mean_var(&v);
        assert!((var - dt).abs() <= 3.0 * se, "variance {var}");
        assert!(m.abs() <= 3.0 * (dt / n as f64).sqrt(), "mean {m}");
    }
}

#[test]
fn fully_correlated_drivers() {
    let noise = NoiseModel::isotropic(1, 1, 1.0, 1.0)
        .with_cross_corr(ttsa_core::Matrix::from_element(1, 1, 1.0));
    let (a, b) = draws(&noise, 20_000, 0.01);
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let cov = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() - 1) as f64;
    assert!(cov / (va * vb).sqrt() >= 0.999);
}

#[test]
fn deterministic_flow_converges_at_first_order() {
    let prob = quadratic_1d();
    let noise = NoiseModel::zero(1, 1);
    let finals = |dt: f64| {
        let mut c = TtsaConfig::new(
            dt,
            5.0,
            schedules(),
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
        );
        c.log_stride = usize::MAX / 2;
        let tr = integrate(&c, &prob, &noise).unwrap();
        (tr.final_x[0], tr.final_y[0])
    };
    let reference = finals(1e-4);
    let err = |dt| {
        let (x, y) = finals(dt);
        ((x - reference.0).powi(2) + (y - reference.1).powi(2)).sqrt()
    };
    let (e1, e2, e3) = (err(0.04), err(0.02), err(0.01));
    for ratio in [e1 / e2, e2 / e3] {
        assert!(
            (1.7..2.3).contains(&ratio),
            "error ratio {ratio} ({e1}, {e2}, {e3})"
        );
    }
}

#[test]
fn trajectory_is_reproducible_and_seed_sensitive() {
    let prob = quadratic_1d();
    let noise = NoiseModel::isotropic(1, 1, 1.0, 1.0);
    let mut c = TtsaConfig::new(
        0.01,
        10.0,
        schedules(),
        Vector::from_element(1, 1.0),
        Vector::from_element(1, 1.0),
    );
    c.seed = 5;
    let a = integrate(&c, &prob, &noise).unwrap();
    let b = integrate(&c, &prob, &noise).unwrap();
    assert_eq!(a, b);
    c.seed = 6;
    let d = integrate(&c, &prob, &noise).unwrap();
    assert_ne!(a.final_x, d.final_x);
    assert_eq!(a.times.len(), 1001);
    assert_eq!(a.gamma1[0], 1.0);
}
