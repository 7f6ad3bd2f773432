//! ECG R-peak detection and time-domain HRV.
//!
//! The detector thresholds the signal against its 0.75 s moving average
//! raised by a margin. The margin is chosen per record from a fixed ladder
//! as the one giving the most regular rhythm at a plausible heart rate.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_slice, Execution};
use crate::orchestrator::PhaseInterval;
use crate::phase::ProcedurePhase;

pub const MA_WINDOW_S: f64 = 0.75;
pub const REFRACTORY_S: f64 = 0.25;
pub const MIN_HRV_DURATION_S: f64 = 10.0;
pub const RR_MIN_MS: f64 = 300.0;
pub const RR_MAX_MS: f64 = 2000.0;
/// Threshold margins above the moving average, percent of its mean.
pub const MARGIN_LADDER_PCT: [f64; 18] = [
    2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 120.0,
    150.0, 200.0, 300.0,
];
const BPM_RANGE: (f64, f64) = (40.0, 180.0);

#[derive(Debug, Error)]
pub enum BiosignalError {
    #[error("sample rate {0} Hz outside [100, 2000]")]
    InvalidSampleRate(f64),
    #[error("signal is {found_s:.2} s long, need at least {need_s} s")]
    SignalTooShort { found_s: f64, need_s: f64 },
    #[error("signal has zero variance")]
    FlatSignal,
    #[error("signal contains non-finite samples")]
    NonFinite,
    #[error("need at least 3 beats, got {0}")]
    TooFewBeats(usize),
    #[error("no unbroken run of two or more RR intervals")]
    TooFewIntervals,
    #[error("interval {phase} [{t_start}, {t_end}] lies outside the recording")]
    IntervalOutOfRange {
        phase: ProcedurePhase,
        t_start: f64,
        t_end: f64,
    },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub sample_rate: f64,
    /// mV.
    pub samples: Vec<f64>,
    /// Time of the first sample (s).
    pub start_time: f64,
}

impl EcgRecord {
    pub fn new(
        sample_rate: f64,
        samples: Vec<f64>,
        start_time: f64,
    ) -> Result<Self, BiosignalError> {
        if !(100.0..=2000.0).contains(&sample_rate) {
            return Err(BiosignalError::InvalidSampleRate(sample_rate));
        }
        if !start_time.is_finite() || samples.iter().any(|v| !v.is_finite()) {
            return Err(BiosignalError::NonFinite);
        }
        Ok(EcgRecord {
            sample_rate,
            samples,
            start_time,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.sample_rate
    }

    /// CSV with a `# fs=<Hz>` comment line and a `t_s,mv` header. Without the
    /// comment the rate is taken from the first two timestamps.
    pub fn from_csv_reader<R: io::BufRead>(reader: R) -> Result<Self, BiosignalError> {
        let mut fs = None;
        let mut t0 = None;
        let mut t1 = None;
        let mut samples = Vec::new();
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let row = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("fs=") {
                    let v: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| BiosignalError::Parse(format!("row {row}: bad fs")))?;
                    fs = Some(v);
                }
                continue;
            }
            if !saw_header {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["t_s", "mv"] {
                    return Err(BiosignalError::Parse(format!(
                        "row {row}: expected header t_s,mv"
                    )));
                }
                saw_header = true;
                continue;
            }
            let mut parts = line.split(',');
            let mut num = |name: &str| -> Result<f64, BiosignalError> {
                parts
                    .next()
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| BiosignalError::Parse(format!("row {row}: bad {name}")))
            };
            let t = num("t_s")?;
            let mv = num("mv")?;
            if t0.is_none() {
                t0 = Some(t);
            } else if t1.is_none() {
                t1 = Some(t);
            }
            samples.push(mv);
        }
        let start = t0.ok_or_else(|| BiosignalError::Parse("no samples".into()))?;
        let fs = match (fs, t1) {
            (Some(fs), _) => fs,
            (None, Some(t1)) if t1 > start => 1.0 / (t1 - start),
            _ => {
                return Err(BiosignalError::Parse(
                    "sample rate unknown: add a `# fs=<Hz>` line".into(),
                ))
            }
        };
        EcgRecord::new(fs, samples, start)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, BiosignalError> {
        Self::from_csv_reader(io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# fs={}", self.sample_rate)?;
        writeln!(w, "t_s,mv")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{},{}", self.time_of(i), v)?;
        }
        w.flush()
    }
}

/// Centered moving average; windows are truncated at the edges.
fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Sample indices of peaks: one local maximum per supra-threshold region,
/// merged within the refractory period keeping the taller one.
fn peaks_above(x: &[f64], threshold: &[f64], refractory: usize) -> Vec<usize> {
    let mut peaks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < x.len() {
        if x[i] <= threshold[i] {
            i += 1;
            continue;
        }
        let mut best = i;
        while i < x.len() && x[i] > threshold[i] {
            if x[i] > x[best] {
                best = i;
            }
            i += 1;
        }
        match peaks.last_mut() {
            Some(last) if best - *last < refractory => {
                if x[best] > x[*last] {
                    *last = best;
                }
            }
            _ => peaks.push(best),
        }
    }
    peaks
}

fn rhythm_spread(peaks: &[usize], fs: f64) -> Option<f64> {
    if peaks.len() < 3 {
        return None;
    }
    let rr: Vec<f64> = peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / fs)
        .collect();
    let mean = rr.iter().sum::<f64>() / rr.len() as f64;
    let bpm = 60.0 / mean;
    if !(BPM_RANGE.0..=BPM_RANGE.1).contains(&bpm) {
        return None;
    }
    let var = rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rr.len() as f64;
    Some(var.sqrt())
}

pub fn detect_r_peaks(ecg: &EcgRecord) -> Result<Vec<f64>, BiosignalError> {
    detect_r_peaks_with(ecg, Execution::default())
}

pub fn detect_r_peaks_with(ecg: &EcgRecord, exec: Execution) -> Result<Vec<f64>, BiosignalError> {
    if ecg.duration() < MIN_HRV_DURATION_S {
        return Err(BiosignalError::SignalTooShort {
            found_s: ecg.duration(),
            need_s: MIN_HRV_DURATION_S,
        });
    }
    let (lo, hi) = ecg
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return Err(BiosignalError::FlatSignal);
    }
    let x: Vec<f64> = ecg.samples.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let window = ((MA_WINDOW_S * ecg.sample_rate).round() as usize).max(1);
    let ma = moving_average(&x, window);
    let ma_mean = ma.iter().sum::<f64>() / ma.len() as f64;
    let refractory = (REFRACTORY_S * ecg.sample_rate).round() as usize;

    let candidates = map_slice(exec, &MARGIN_LADDER_PCT, |&pct| {
        let lift = pct / 100.0 * ma_mean;
        let threshold: Vec<f64> = ma.iter().map(|m| m + lift).collect();
        let peaks = peaks_above(&x, &threshold, refractory);
        let spread = rhythm_spread(&peaks, ecg.sample_rate);
        (peaks, spread)
    });
    let best = candidates
        .iter()
        .filter_map(|(p, s)| s.map(|s| (p, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| p.clone())
        // nothing plausible: fall back to the lowest margin
        .unwrap_or_else(|| candidates[0].0.clone());
    Ok(best.into_iter().map(|i| ecg.time_of(i)).collect())
}

/// Unbroken run of beats with every interval inside the plausible range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrSegment {
    pub beat_times: Vec<f64>,
    pub rr_ms: Vec<f64>,
}

/// RR intervals split at discarded intervals; successive differences are
/// never taken across a break.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RrSeries {
    pub segments: Vec<RrSegment>,
}

impl RrSeries {
    /// Builds segments from raw intervals; out-of-range values start a new
    /// segment. Beat times are cumulative from zero.
    pub fn from_rr_ms(rr: &[f64]) -> RrSeries {
        let mut segments = Vec::new();
        let mut current: Option<RrSegment> = None;
        let mut t = 0.0;
        for &r in rr {
            let next_t = t + r / 1000.0;
            if (RR_MIN_MS..=RR_MAX_MS).contains(&r) {
                let seg = current.get_or_insert_with(|| RrSegment {
                    beat_times: vec![t],
                    rr_ms: Vec::new(),
                });
                seg.beat_times.push(next_t);
                seg.rr_ms.push(r);
            } else if let Some(seg) = current.take() {
                segments.push(seg);
            }
            t = next_t;
        }
        segments.extend(current);
        RrSeries { segments }
    }

    /// All retained intervals in order, breaks dropped.
    pub fn rr_intervals(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| s.rr_ms.iter().copied())
            .collect()
    }

    pub fn beat_times(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| s.beat_times.iter().copied())
            .collect()
    }

    pub fn n_breaks(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    pub fn map_rr(&self, f: impl Fn(f64) -> f64) -> RrSeries {
        RrSeries {
            segments: self
                .segments
                .iter()
                .map(|s| RrSegment {
                    beat_times: s.beat_times.clone(),
                    rr_ms: s.rr_ms.iter().map(|&r| f(r)).collect(),
                })
                .collect(),
        }
    }

    /// Same segments, each reversed, in reverse order.
    pub fn reversed(&self) -> RrSeries {
        RrSeries {
            segments: self
                .segments
                .iter()
                .rev()
                .map(|s| RrSegment {
                    beat_times: s.beat_times.iter().rev().copied().collect(),
                    rr_ms: s.rr_ms.iter().rev().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_csv_reader<R: io::Read>(r: R) -> Result<RrSeries, BiosignalError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| BiosignalError::Parse(e.to_string()))?
            .clone();
        if headers.get(0) != Some("rr_ms") {
            return Err(BiosignalError::Parse("row 1: expected header rr_ms".into()));
        }
        let mut rr = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| BiosignalError::Parse(format!("row {row}: {e}")))?;
            let v = rec
                .get(0)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| BiosignalError::Parse(format!("row {row}: bad rr_ms")))?;
            rr.push(v);
        }
        Ok(RrSeries::from_rr_ms(&rr))
    }
}

pub fn rr_from_peaks(beat_times: &[f64]) -> Result<RrSeries, BiosignalError> {
    if beat_times.len() < 3 {
        return Err(BiosignalError::TooFewBeats(beat_times.len()));
    }
    let mut segments = Vec::new();
    let mut current: Option<RrSegment> = None;
    for w in beat_times.windows(2) {
        let rr = (w[1] - w[0]) * 1000.0;
        if (RR_MIN_MS..=RR_MAX_MS).contains(&rr) {
            let seg = current.get_or_insert_with(|| RrSegment {
                beat_times: vec![w[0]],
                rr_ms: Vec::new(),
            });
            seg.beat_times.push(w[1]);
            seg.rr_ms.push(rr);
        } else if let Some(seg) = current.take() {
            segments.push(seg);
        }
    }
    segments.extend(current);
    Ok(RrSeries { segments })
}

pub fn rmssd(rr: &RrSeries) -> Result<f64, BiosignalError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seg in &rr.segments {
        for w in seg.rr_ms.windows(2) {
            let d = w[1] - w[0];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(BiosignalError::TooFewIntervals);
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrvFlag {
    InsufficientBeatsInPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrvReport {
    pub phase: ProcedurePhase,
    pub t_start: f64,
    pub t_end: f64,
    pub n_beats: usize,
    /// Absent when the report is flagged.
    pub rmssd: Option<f64>,
    pub flag: Option<HrvFlag>,
}

fn is_hrv_phase(p: ProcedurePhase) -> bool {
    matches!(p, ProcedurePhase::Resting | ProcedurePhase::Execution)
}

/// One report per Resting/Execution interval, from the beats with times in
/// `[t_start, t_end)`.
pub fn segment_hrv_beats(beats: &[f64], intervals: &[PhaseInterval]) -> Vec<HrvReport> {
    intervals
        .iter()
        .filter(|iv| is_hrv_phase(iv.phase))
        .map(|iv| {
            let inside: Vec<f64> = beats
                .iter()
                .copied()
                .filter(|&t| t >= iv.t_start && t < iv.t_end)
                .collect();
            let rmssd = rr_from_peaks(&inside).and_then(|rr| rmssd(&rr)).ok();
            HrvReport {
                phase: iv.phase,
                t_start: iv.t_start,
                t_end: iv.t_end,
                n_beats: inside.len(),
                rmssd,
                flag: rmssd.is_none().then_some(HrvFlag::InsufficientBeatsInPhase),
            }
        })
        .collect()
}

pub fn segment_hrv(
    ecg: &EcgRecord,
    intervals: &[PhaseInterval],
) -> Result<Vec<HrvReport>, BiosignalError> {
    let slack = 1.0 / ecg.sample_rate;
    for iv in intervals.iter().filter(|iv| is_hrv_phase(iv.phase)) {
        if iv.t_start < ecg.start_time - slack
            || iv.t_end > ecg.end_time() + slack
            || iv.t_end < iv.t_start
        {
            return Err(BiosignalError::IntervalOutOfRange {
                phase: iv.phase,
                t_start: iv.t_start,
                t_end: iv.t_end,
            });
        }
    }
    let beats = detect_r_peaks(ecg)?;
    Ok(segment_hrv_beats(&beats, intervals))
}

pub fn write_hrv_csv<W: io::Write>(reports: &[HrvReport], w: W) -> io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let io_err = |e: csv::Error| io::Error::other(e);
    csv.write_record(["phase", "t_start", "t_end", "n_beats", "rmssd_ms"])
        .map_err(io_err)?;
    for r in reports {
        csv.write_record([
            r.phase.as_str().to_string(),
            r.t_start.to_string(),
            r.t_end.to_string(),
            r.n_beats.to_string(),
            r.rmssd.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    csv.flush()
}

/// Synthetic ECG-like signals with known beat times.
pub mod synth {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::EcgRecord;
    use crate::orchestrator::PhaseInterval;
    use crate::phase::ProcedurePhase;

    pub const BUMP_SIGMA_S: f64 = 0.02;

    /// Unit-height Gaussian bumps centered on `beats`.
    pub fn gaussian_train(fs: f64, duration_s: f64, beats: &[f64]) -> Vec<f64> {
        let n = (duration_s * fs).round() as usize;
        let reach = 6.0 * BUMP_SIGMA_S;
        let mut x = vec![0.0; n];
        for &b in beats {
            let lo = ((b - reach) * fs).floor().max(0.0) as usize;
            let hi = (((b + reach) * fs).ceil() as usize).min(n);
            for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = i as f64 / fs - b;
                *v += (-0.5 * (dt / BUMP_SIGMA_S).powi(2)).exp();
            }
        }
        x
    }

    /// White Gaussian noise at the given signal-to-noise power ratio.
    pub fn add_noise(x: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
        let power = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
        let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        let normal = Normal::new(0.0, sd).expect("finite sd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        x.iter().map(|v| v + normal.sample(&mut rng)).collect()
    }

    /// Beats from `t_start` with RR drawn from N(mean, sd) (seconds),
    /// clipped to the plausible range.
    pub fn beats_with_variability(
        t_start: f64,
        t_end: f64,
        mean_rr: f64,
        sd_rr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let normal = Normal::new(mean_rr, sd_rr).expect("finite sd");
        let mut out = Vec::new();
        let mut t = t_start;
        while t < t_end {
            out.push(t);
            t += normal.sample(rng).clamp(0.35, 1.9);
        }
        out
    }

    /// ECG over the span of `intervals` with calm, variable rhythm outside
    /// Execution and a faster, steadier one during it.
    pub fn session_ecg(fs: f64, intervals: &[PhaseInterval], seed: u64) -> (EcgRecord, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = intervals.first().map_or(0.0, |i| i.t_start);
        let end = intervals.last().map_or(0.0, |i| i.t_end);
        let mut beats: Vec<f64> = Vec::new();
        let mut t = start + 0.3;
        for iv in intervals {
            let (mean, sd) = if iv.phase == ProcedurePhase::Execution {
                (0.7, 0.01)
            } else {
                (0.9, 0.05)
            };
            let seg = beats_with_variability(t, iv.t_end, mean, sd, &mut rng);
            if let Some(&last) = seg.last() {
                t = last + mean;
            }
            beats.extend(seg);
        }
        beats.retain(|&b| b < end - 0.2);
        let rel: Vec<f64> = beats.iter().map(|b| b - start).collect();
        let samples = gaussian_train(fs, end - start, &rel);
        let record = EcgRecord::new(fs, samples, start).expect("valid synthetic record");
        (record, beats)
    }
}
