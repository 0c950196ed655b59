//! Statistical checks of the synthetic generator at p < 0.01.
//!
//! Under honest reporting every reported coordinate is the true one plus
//! independent N(0, noise²) noise, so a sum of k squared standardized
//! deviations is χ²(k). For k in the thousands the normal approximation
//! k ± 2.326·sqrt(2k) gives the one-sided 1% critical values.

use ids_core::data::BsmRecord;
use ids_core::synth::{synth_generate, AttackSpec, Injector, SynthConfig, SynthOutput};

const Z99: f64 = 2.326;

fn upper(k: usize) -> f64 {
    k as f64 + Z99 * (2.0 * k as f64).sqrt()
}

fn lower(k: usize) -> f64 {
    k as f64 - Z99 * (2.0 * k as f64).sqrt()
}

fn scenario(attack: Option<&str>, vehicles: usize) -> (SynthConfig, SynthOutput) {
    let cfg = SynthConfig {
        normal_vehicles: if attack.is_some() { 2 } else { vehicles },
        messages_per_vehicle: 200,
        attacks: attack
            .map(|a| {
                vec![AttackSpec {
                    injector: a.into(),
                    vehicles,
                }]
            })
            .unwrap_or_default(),
        ..Default::default()
    };
    let out = synth_generate(&cfg, 2024).unwrap();
    (cfg, out)
}

/// Sum of squared standardized deviations from the truth for one field.
fn chi2(out: &SynthOutput, label: usize, noise: f64, field: fn(&BsmRecord) -> [f64; 2]) -> (f64, usize) {
    let mut s = 0.0;
    let mut k = 0;
    for (r, t) in out.records.iter().zip(&out.truth) {
        if r.label != label {
            continue;
        }
        let (a, b) = (field(r), field(t));
        for i in 0..2 {
            s += ((a[i] - b[i]) / noise).powi(2);
            k += 1;
        }
    }
    (s, k)
}

fn pos(r: &BsmRecord) -> [f64; 2] {
    [r.pos_x, r.pos_y]
}

fn spd(r: &BsmRecord) -> [f64; 2] {
    [r.spd_x, r.spd_y]
}

#[test]
fn normal_streams_are_kinematically_consistent() {
    let (cfg, out) = scenario(None, 10);
    assert!(out.records.len() >= 1000);
    let sigma2 = cfg.noise.powi(2) * (2.0 + cfg.dt.powi(2));
    let mut s = 0.0;
    let mut k = 0;
    for track in out.records.chunks(cfg.messages_per_vehicle) {
        // every other step keeps the residuals independent
        for pair in track.windows(2).step_by(2) {
            let (a, b) = (&pair[0], &pair[1]);
            for (p0, p1, v) in [(a.pos_x, b.pos_x, a.spd_x), (a.pos_y, b.pos_y, a.spd_y)] {
                s += (p1 - p0 - v * cfg.dt).powi(2) / sigma2;
                k += 1;
            }
        }
    }
    assert!(s > lower(k) && s < upper(k), "chi2 {s} over {k}");
}

#[test]
fn noiseless_straight_line() {
    let cfg = SynthConfig {
        normal_vehicles: 1,
        messages_per_vehicle: 5,
        noise: 0.0,
        max_accel: 0.0,
        start: Some([0.0, 0.0]),
        velocity: Some([1.0, 0.0]),
        ..Default::default()
    };
    let out = synth_generate(&cfg, 0).unwrap();
    let xs: Vec<f64> = out.records.iter().map(|r| r.pos_x).collect();
    assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn every_injector_breaks_its_targeted_field() {
    for inj in Injector::ALL {
        let (cfg, out) = scenario(Some(inj.name()), 6);
        let label = inj.label();
        assert!(out.records.iter().filter(|r| r.label == label).count() >= 1000);
        let (sp, kp) = chi2(&out, label, cfg.noise, pos);
        let (ss, ks) = chi2(&out, label, cfg.noise, spd);
        let targets_speed = !inj.targets_position()
            || matches!(inj, Injector::EventualStop | Injector::Replay);
        if inj.targets_position() {
            assert!(sp > upper(kp), "{}: position chi2 {sp} over {kp}", inj.name());
        } else {
            assert!(sp < upper(kp), "{}: position should be honest", inj.name());
        }
        if targets_speed {
            assert!(ss > upper(ks), "{}: speed chi2 {ss} over {ks}", inj.name());
        } else {
            assert!(ss < upper(ks), "{}: speed should be honest", inj.name());
        }
    }
}

#[test]
fn honest_vehicles_pass_the_same_test() {
    let (cfg, out) = scenario(None, 6);
    for field in [pos, spd] {
        let (s, k) = chi2(&out, 0, cfg.noise, field);
        assert!(s > lower(k) && s < upper(k));
    }
}

#[test]
fn constant_position_shares_one_position() {
    let cfg = SynthConfig {
        normal_vehicles: 0,
        noise: 0.0,
        attacks: vec![AttackSpec {
            injector: "constant_position".into(),
            vehicles: 1,
        }],
        ..Default::default()
    };
    let out = synth_generate(&cfg, 5).unwrap();
    let first = &out.records[0];
    assert!(out.records.iter().all(|r| (r.pos_x, r.pos_y) == (first.pos_x, first.pos_y)));
    assert!(out.records.iter().any(|r| (r.spd_x, r.spd_y) != (first.spd_x, first.spd_y)));
}

#[test]
fn sensor_noise_reaches_acceleration_and_heading() {
    let cfg = SynthConfig {
        normal_vehicles: 5,
        acl_noise: 0.2,
        hed_noise: 0.1,
        ..Default::default()
    };
    let out = synth_generate(&cfg, 8).unwrap();
    let (mut sa, mut sh, mut k) = (0.0, 0.0, 0);
    for (r, t) in out.records.iter().zip(&out.truth) {
        for (a, b) in [(r.acl_x, t.acl_x), (r.acl_y, t.acl_y)] {
            sa += ((a - b) / cfg.acl_noise).powi(2);
        }
        for (a, b) in [(r.hed_x, t.hed_x), (r.hed_y, t.hed_y)] {
            sh += ((a - b) / cfg.hed_noise).powi(2);
        }
        k += 2;
    }
    assert!(sa > lower(k) && sa < upper(k), "acceleration chi2 {sa} over {k}");
    assert!(sh > lower(k) && sh < upper(k), "heading chi2 {sh} over {k}");
    let noiseless = synth_generate(&SynthConfig { normal_vehicles: 5, ..Default::default() }, 8).unwrap();
    assert!(noiseless.records.iter().zip(&noiseless.truth).all(|(r, t)| r.acl_x == t.acl_x));
}
