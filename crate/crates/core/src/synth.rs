//! Seeded generator of safety-message streams with injected misbehavior.
//!
//! Every vehicle follows `pos += spd·dt`, then `spd += acl·dt`, with
//! acceleration resampled every [`ACCEL_HOLD`] messages. Attackers run the
//! same honest kinematics and an injector rewrites what they report.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::BsmRecord;
use crate::error::{CoreError, Result};

pub const ACCEL_HOLD: usize = 10;
/// Length of the message buffer a replaying attacker cycles through.
pub const REPLAY_BUFFER: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injector {
    ConstantPosition,
    ConstantOffset,
    RandomPosition,
    RandomOffset,
    ConstantSpeed,
    SpeedOffset,
    RandomSpeed,
    EventualStop,
    Replay,
}

impl Injector {
    pub const ALL: [Injector; 9] = [
        Injector::ConstantPosition,
        Injector::ConstantOffset,
        Injector::RandomPosition,
        Injector::RandomOffset,
        Injector::ConstantSpeed,
        Injector::SpeedOffset,
        Injector::RandomSpeed,
        Injector::EventualStop,
        Injector::Replay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Injector::ConstantPosition => "constant_position",
            Injector::ConstantOffset => "constant_offset",
            Injector::RandomPosition => "random_position",
            Injector::RandomOffset => "random_offset",
            Injector::ConstantSpeed => "constant_speed",
            Injector::SpeedOffset => "speed_offset",
            Injector::RandomSpeed => "random_speed",
            Injector::EventualStop => "eventual_stop",
            Injector::Replay => "replay",
        }
    }

    /// Attack class in the 1..=19 taxonomy.
    pub fn label(self) -> usize {
        match self {
            Injector::ConstantPosition => 1,
            Injector::ConstantOffset => 2,
            Injector::RandomPosition => 3,
            Injector::RandomOffset => 4,
            Injector::ConstantSpeed => 5,
            Injector::SpeedOffset => 6,
            Injector::RandomSpeed => 7,
            Injector::EventualStop => 9,
            Injector::Replay => 11,
        }
    }

    pub fn targets_position(self) -> bool {
        !matches!(
            self,
            Injector::ConstantSpeed | Injector::SpeedOffset | Injector::RandomSpeed
        )
    }
}

impl std::str::FromStr for Injector {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Injector::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| CoreError::UnknownInjector(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub injector: String,
    pub vehicles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub normal_vehicles: usize,
    pub messages_per_vehicle: usize,
    /// Seconds between messages.
    pub dt: f64,
    /// Standard deviation of Gaussian noise on reported position and speed.
    pub noise: f64,
    /// Standard deviation of Gaussian noise on reported acceleration.
    pub acl_noise: f64,
    /// Standard deviation of Gaussian noise on the reported heading vector.
    pub hed_noise: f64,
    /// Side of the square area vehicles start in, meters.
    pub area: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    /// Fixed start position and velocity for every vehicle, if set.
    pub start: Option<[f64; 2]>,
    pub velocity: Option<[f64; 2]>,
    /// Magnitude range of position offsets, meters.
    pub offset_range: [f64; 2],
    /// Magnitude range of speed offsets, m/s.
    pub speed_offset_range: [f64; 2],
    pub attacks: Vec<AttackSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            normal_vehicles: 20,
            messages_per_vehicle: 200,
            dt: 1.0,
            noise: 0.05,
            acl_noise: 0.0,
            hed_noise: 0.0,
            area: 1000.0,
            min_speed: 5.0,
            max_speed: 20.0,
            max_accel: 1.0,
            start: None,
            velocity: None,
            offset_range: [50.0, 150.0],
            speed_offset_range: [5.0, 15.0],
            attacks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthOutput {
    /// Reported messages, labeled.
    pub records: Vec<BsmRecord>,
    /// Noise-free honest kinematics, aligned with `records`.
    pub truth: Vec<BsmRecord>,
    pub labels: BTreeMap<u64, usize>,
}

#[derive(Clone, Copy)]
struct State {
    pos: [f64; 2],
    spd: [f64; 2],
    acl: [f64; 2],
    hed: [f64; 2],
}

fn heading(spd: [f64; 2], prev: [f64; 2]) -> [f64; 2] {
    let n = spd[0].hypot(spd[1]);
    if n > 0.0 {
        [spd[0] / n, spd[1] / n]
    } else {
        prev
    }
}

fn polar(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [r * a.cos(), r * a.sin()]
}

fn honest_trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<State> {
    let pos = cfg.start.unwrap_or_else(|| {
        [
            rng.random_range(0.0..cfg.area.max(f64::MIN_POSITIVE)),
            rng.random_range(0.0..cfg.area.max(f64::MIN_POSITIVE)),
        ]
    });
    let spd = cfg
        .velocity
        .unwrap_or_else(|| polar(rng, cfg.min_speed, cfg.max_speed));
    let mut s = State {
        pos,
        spd,
        acl: [0.0; 2],
        hed: heading(spd, [1.0, 0.0]),
    };
    let mut out = Vec::with_capacity(cfg.messages_per_vehicle);
    for i in 0..cfg.messages_per_vehicle {
        if i % ACCEL_HOLD == 0 {
            s.acl = if cfg.max_accel > 0.0 {
                [
                    rng.random_range(-cfg.max_accel..cfg.max_accel),
                    rng.random_range(-cfg.max_accel..cfg.max_accel),
                ]
            } else {
                [0.0; 2]
            };
            // keep speed inside the configured band
            let v = s.spd[0].hypot(s.spd[1]);
            let along = s.acl[0] * s.spd[0] + s.acl[1] * s.spd[1];
            if (v >= cfg.max_speed && along > 0.0) || (v <= cfg.min_speed && along < 0.0) {
                s.acl = [-s.acl[0], -s.acl[1]];
            }
        }
        s.hed = heading(s.spd, s.hed);
        out.push(s);
        for k in 0..2 {
            s.pos[k] += s.spd[k] * cfg.dt;
            s.spd[k] += s.acl[k] * cfg.dt;
        }
    }
    out
}

fn record(sender: u64, i: usize, dt: f64, s: &State, label: usize) -> BsmRecord {
    BsmRecord {
        send_time: i as f64 * dt,
        sender_id: sender,
        pseudo_id: 10_000 + sender,
        message_id: sender * 1_000_000 + i as u64,
        pos_x: s.pos[0],
        pos_y: s.pos[1],
        spd_x: s.spd[0],
        spd_y: s.spd[1],
        acl_x: s.acl[0],
        acl_y: s.acl[1],
        hed_x: s.hed[0],
        hed_y: s.hed[1],
        label,
    }
}

/// Rewrites an honest trajectory as the attacker reports it.
fn inject(
    inj: Injector,
    cfg: &SynthConfig,
    honest: &[State],
    victim: &[State],
    rng: &mut ChaCha8Rng,
) -> Vec<State> {
    let mut out = honest.to_vec();
    let [olo, ohi] = cfg.offset_range;
    let [slo, shi] = cfg.speed_offset_range;
    match inj {
        Injector::ConstantPosition => {
            let p = [
                rng.random_range(0.0..cfg.area.max(1.0)),
                rng.random_range(0.0..cfg.area.max(1.0)),
            ];
            out.iter_mut().for_each(|s| s.pos = p);
        }
        Injector::ConstantOffset => {
            let d = polar(rng, olo, ohi);
            out.iter_mut().for_each(|s| {
                s.pos = [s.pos[0] + d[0], s.pos[1] + d[1]];
            });
        }
        Injector::RandomPosition => out.iter_mut().for_each(|s| {
            s.pos = [
                rng.random_range(0.0..cfg.area.max(1.0)),
                rng.random_range(0.0..cfg.area.max(1.0)),
            ];
        }),
        Injector::RandomOffset => out.iter_mut().for_each(|s| {
            let d = polar(rng, olo, ohi);
            s.pos = [s.pos[0] + d[0], s.pos[1] + d[1]];
        }),
        Injector::ConstantSpeed => {
            let v = polar(rng, cfg.min_speed, cfg.max_speed);
            out.iter_mut().for_each(|s| s.spd = v);
        }
        Injector::SpeedOffset => {
            let d = polar(rng, slo, shi);
            out.iter_mut().for_each(|s| {
                s.spd = [s.spd[0] + d[0], s.spd[1] + d[1]];
            });
        }
        Injector::RandomSpeed => out.iter_mut().for_each(|s| {
            s.spd = polar(rng, 0.0, cfg.max_speed);
        }),
        Injector::EventualStop => {
            let at = rng.random_range(0..(honest.len() / 4).max(1));
            let p = honest[at].pos;
            for s in &mut out[at..] {
                s.pos = p;
                s.spd = [0.0; 2];
                s.acl = [0.0; 2];
            }
        }
        Injector::Replay => {
            let n = victim.len().min(REPLAY_BUFFER).max(1);
            let start = rng.random_range(0..=victim.len() - n);
            for (i, s) in out.iter_mut().enumerate() {
                *s = victim[start + i % n];
            }
        }
    }
    out
}

/// Generates normal vehicles first (ids `1..=normal_vehicles`), then each
/// attack group in order.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    let injectors = cfg
        .attacks
        .iter()
        .map(|a| Ok((a.injector.parse::<Injector>()?, a.vehicles)))
        .collect::<Result<Vec<_>>>()?;
    let noises = [cfg.noise, cfg.acl_noise, cfg.hed_noise];
    if !(cfg.dt > 0.0) || noises.iter().any(|n| !(*n >= 0.0)) || cfg.min_speed > cfg.max_speed {
        return Err(CoreError::Config("invalid synthetic scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |sd: f64| Normal::new(0.0, sd).map_err(|e| CoreError::Config(e.to_string()));
    let (noise, acl_noise, hed_noise) = (gauss(cfg.noise)?, gauss(cfg.acl_noise)?, gauss(cfg.hed_noise)?);
    let mut out = SynthOutput::default();
    let mut normal_tracks: Vec<Vec<State>> = Vec::new();
    let mut sender = 0u64;

    let emit = |out: &mut SynthOutput,
                    rng: &mut ChaCha8Rng,
                    sender: u64,
                    label: usize,
                    honest: &[State],
                    reported: &[State]| {
        out.labels.insert(sender, label);
        for (i, (h, r)) in honest.iter().zip(reported).enumerate() {
            let mut r = *r;
            if cfg.noise > 0.0 {
                for k in 0..2 {
                    r.pos[k] += noise.sample(rng);
                    r.spd[k] += noise.sample(rng);
                }
            }
            if cfg.acl_noise > 0.0 {
                for k in 0..2 {
                    r.acl[k] += acl_noise.sample(rng);
                }
            }
            if cfg.hed_noise > 0.0 {
                for k in 0..2 {
                    r.hed[k] += hed_noise.sample(rng);
                }
            }
            out.truth.push(record(sender, i, cfg.dt, h, label));
            out.records.push(record(sender, i, cfg.dt, &r, label));
        }
    };

    for _ in 0..cfg.normal_vehicles {
        sender += 1;
        let track = honest_trajectory(cfg, &mut rng);
        emit(&mut out, &mut rng, sender, 0, &track, &track);
        normal_tracks.push(track);
    }
    for (inj, count) in injectors {
        for _ in 0..count {
            sender += 1;
            let honest = honest_trajectory(cfg, &mut rng);
            let victim = if inj == Injector::Replay && !normal_tracks.is_empty() {
                normal_tracks[rng.random_range(0..normal_tracks.len())].clone()
            } else {
                honest_trajectory(cfg, &mut rng)
            };
            let reported = inject(inj, cfg, &honest, &victim, &mut rng);
            emit(&mut out, &mut rng, sender, inj.label(), &honest, &reported);
        }
    }
    Ok(out)
}
