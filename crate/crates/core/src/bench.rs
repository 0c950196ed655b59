//! Detection latency benchmark.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::FeatureWindow;
use crate::detect::{Detection, Detector};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total_windows: usize,
    pub unique_vehicles: usize,
    pub repetitions: usize,
    /// Median normalization time of the incoming windows.
    pub data_setup_ms: f64,
    /// Median time of both detection stages.
    pub prediction_ms: f64,
    pub total_ms: f64,
    pub per_vehicle_ms: f64,
    pub environment: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl BenchReport {
    /// Assembles a report from per-repetition timings in milliseconds.
    pub fn from_timings(
        windows: &[FeatureWindow],
        setup_ms: Vec<f64>,
        predict_ms: Vec<f64>,
        environment: &str,
    ) -> Self {
        let unique_vehicles = windows
            .iter()
            .map(|w| w.sender_id)
            .collect::<BTreeSet<_>>()
            .len();
        let repetitions = setup_ms.len();
        let data_setup_ms = median(setup_ms);
        let prediction_ms = median(predict_ms);
        let total_ms = data_setup_ms + prediction_ms;
        Self {
            total_windows: windows.len(),
            unique_vehicles,
            repetitions,
            data_setup_ms,
            prediction_ms,
            total_ms,
            per_vehicle_ms: total_ms / unique_vehicles.max(1) as f64,
            environment: environment.to_string(),
        }
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("total_windows", self.total_windows.to_string()),
            ("unique_vehicles", self.unique_vehicles.to_string()),
            ("repetitions", self.repetitions.to_string()),
            ("data_setup_ms", format!("{:.6}", self.data_setup_ms)),
            ("prediction_ms", format!("{:.6}", self.prediction_ms)),
            ("total_ms", format!("{:.6}", self.total_ms)),
            ("per_vehicle_ms", format!("{:.6}", self.per_vehicle_ms)),
            ("environment", self.environment.clone()),
        ]
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::from("# data_setup = window normalization; prediction = stage 1 + stage 2\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let (keys, values): (Vec<_>, Vec<_>) = self.rows().into_iter().unzip();
        format!("{}\n{}\n", keys.join(","), values.join(","))
    }
}

/// Times `repetitions` full passes over `raw` after `warmup` untimed ones
/// and returns the report plus the detections of the last pass.
pub fn bench(
    detector: &Detector,
    raw: &[FeatureWindow],
    repetitions: usize,
    warmup: usize,
    environment: &str,
) -> Result<(BenchReport, Vec<Detection>)> {
    if raw.is_empty() {
        return Err(CoreError::Empty {
            what: "benchmark window set",
        });
    }
    if repetitions == 0 {
        return Err(CoreError::Config("repetitions must be positive".into()));
    }
    for _ in 0..warmup {
        detector.detect(raw)?;
    }
    let (mut setup, mut predict) = (Vec::new(), Vec::new());
    let mut last = Vec::new();
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let norm = detector.normalize(raw);
        let t1 = Instant::now();
        last = detector.detect_normalized(&norm)?;
        let t2 = Instant::now();
        setup.push((t1 - t0).as_secs_f64() * 1e3);
        predict.push((t2 - t1).as_secs_f64() * 1e3);
    }
    Ok((BenchReport::from_timings(raw, setup, predict, environment), last))
}
