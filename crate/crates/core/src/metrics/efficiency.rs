use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BYTES_PER_GB: f64 = 1e9;

/// Usage fraction × duration (hours) × computing units.
pub fn core_hours(usage_fraction: f64, duration_hours: f64, computing_units: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&usage_fraction) {
        return Err(Error::Domain(format!(
            "usage fraction {usage_fraction} outside [0, 1]"
        )));
    }
    if !(duration_hours >= 0.0) {
        return Err(Error::Domain(format!(
            "duration {duration_hours} h is negative"
        )));
    }
    if computing_units < 1 {
        return Err(Error::Domain("at least one computing unit required".into()));
    }
    Ok(usage_fraction * duration_hours * computing_units as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    /// Seconds since the phase started.
    pub t: f64,
    pub resident_memory_bytes: u64,
    pub cpu_busy_fraction: f64,
}

/// Raw sample stream of one monitored phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub samples: Vec<ResourceSample>,
    pub wall_seconds: f64,
    pub computing_units: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub max_memory_gb: f64,
    pub avg_memory_gb: f64,
    pub mean_busy_fraction: f64,
    pub wall_hours: f64,
    pub core_hours: f64,
    pub n_samples: usize,
    pub warning: Option<String>,
}

/// Trapezoidal time-weighted mean; a single sample (or zero elapsed time)
/// falls back to the plain mean.
fn time_weighted_mean(samples: &[ResourceSample], value: impl Fn(&ResourceSample) -> f64) -> f64 {
    let span = samples.last().map_or(0.0, |l| l.t) - samples.first().map_or(0.0, |f| f.t);
    if samples.len() < 2 || span <= 0.0 {
        return samples.iter().map(&value).sum::<f64>() / samples.len().max(1) as f64;
    }
    let area: f64 = samples
        .windows(2)
        .map(|w| 0.5 * (value(&w[0]) + value(&w[1])) * (w[1].t - w[0].t))
        .sum();
    area / span
}

pub fn summarize_phase(record: &PhaseRecord) -> Result<PhaseSummary> {
    let s = &record.samples;
    let wall_hours = record.wall_seconds / 3600.0;
    if s.is_empty() {
        return Ok(PhaseSummary {
            max_memory_gb: 0.0,
            avg_memory_gb: 0.0,
            mean_busy_fraction: 0.0,
            wall_hours,
            core_hours: 0.0,
            n_samples: 0,
            warning: Some("no resource samples collected".into()),
        });
    }
    let max_bytes = s.iter().map(|x| x.resident_memory_bytes).max().unwrap_or(0);
    let avg_bytes = time_weighted_mean(s, |x| x.resident_memory_bytes as f64);
    let busy = time_weighted_mean(s, |x| x.cpu_busy_fraction).clamp(0.0, 1.0);
    Ok(PhaseSummary {
        max_memory_gb: max_bytes as f64 / BYTES_PER_GB,
        // the trapezoid mean never exceeds the max, but rounding can
        avg_memory_gb: (avg_bytes / BYTES_PER_GB).min(max_bytes as f64 / BYTES_PER_GB),
        mean_busy_fraction: busy,
        wall_hours,
        core_hours: core_hours(busy, wall_hours, record.computing_units)?,
        n_samples: s.len(),
        warning: None,
    })
}

/// Memory in GB, compute in core-hours, epoch time in minutes, total
/// training time in hours and inference time in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EfficiencyReport {
    pub MaxMT: f64,
    pub AvgMT: f64,
    pub MaxMI: f64,
    pub AvgMI: f64,
    pub TotCT: f64,
    pub TotCI: f64,
    pub AvgET: f64,
    pub TotTT: f64,
    pub TotTI: f64,
    pub usage_fraction: String,
    pub warnings: Vec<String>,
}

impl EfficiencyReport {
    pub fn from_phases(training: &PhaseSummary, inference: &PhaseSummary, epochs: usize) -> Self {
        let warnings = [training, inference]
            .iter()
            .zip(["training", "inference"])
            .filter_map(|(p, name)| p.warning.as_ref().map(|w| format!("{name}: {w}")))
            .collect();
        Self {
            MaxMT: training.max_memory_gb,
            AvgMT: training.avg_memory_gb,
            MaxMI: inference.max_memory_gb,
            AvgMI: inference.avg_memory_gb,
            TotCT: training.core_hours,
            TotCI: inference.core_hours,
            AvgET: if epochs == 0 {
                0.0
            } else {
                training.wall_hours * 60.0 / epochs as f64
            },
            TotTT: training.wall_hours,
            TotTI: inference.wall_hours * 60.0,
            usage_fraction: "mean_over_phase".into(),
            warnings,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ProcStat {
    rss_bytes: u64,
    cpu_seconds: f64,
}

#[cfg(target_os = "linux")]
fn read_proc() -> Option<ProcStat> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesized command name; utime and stime are fields 14 and 15
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions
    let (page, ticks) = unsafe {
        (
            libc::sysconf(libc::_SC_PAGESIZE),
            libc::sysconf(libc::_SC_CLK_TCK),
        )
    };
    if page <= 0 || ticks <= 0 {
        return None;
    }
    Some(ProcStat {
        rss_bytes: pages * page as u64,
        cpu_seconds: (utime + stime) as f64 / ticks as f64,
    })
}

#[cfg(not(target_os = "linux"))]
fn read_proc() -> Option<ProcStat> {
    None
}

/// Background sampler of process memory and CPU use for one phase.
pub struct ResourceMonitor {
    phase: Phase,
    units: u32,
    start: Instant,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Vec<ResourceSample>>>,
}

impl ResourceMonitor {
    pub fn start(phase: Phase, interval: Duration, computing_units: u32) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let start = Instant::now();
        let flag = stop.clone();
        let units = computing_units.max(1);
        let handle = std::thread::spawn(move || {
            let mut samples = Vec::new();
            let mut last = read_proc().map(|p| (0.0, p.cpu_seconds));
            loop {
                let stopping = flag.load(Ordering::Acquire);
                let t = start.elapsed().as_secs_f64();
                if let Some(p) = read_proc() {
                    let busy = match last {
                        Some((t0, c0)) if t > t0 => {
                            ((p.cpu_seconds - c0) / ((t - t0) * units as f64)).clamp(0.0, 1.0)
                        }
                        _ => 0.0,
                    };
                    samples.push(ResourceSample {
                        t,
                        resident_memory_bytes: p.rss_bytes,
                        cpu_busy_fraction: busy,
                    });
                    last = Some((t, p.cpu_seconds));
                }
                if stopping {
                    break;
                }
                let deadline = Instant::now() + interval;
                while Instant::now() < deadline && !flag.load(Ordering::Acquire) {
                    std::thread::sleep(Duration::from_millis(5).min(interval));
                }
            }
            samples
        });
        Self {
            phase,
            units,
            start,
            stop,
            handle: Some(handle),
        }
    }

    pub fn finish(mut self) -> PhaseRecord {
        let wall_seconds = self.start.elapsed().as_secs_f64();
        self.stop.store(true, Ordering::Release);
        let samples = self
            .handle
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        PhaseRecord {
            phase: self.phase,
            samples,
            wall_seconds,
            computing_units: self.units,
        }
    }
}

impl Drop for ResourceMonitor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, gb: f64) -> ResourceSample {
        ResourceSample {
            t,
            resident_memory_bytes: (gb * BYTES_PER_GB) as u64,
            cpu_busy_fraction: 0.5,
        }
    }

    #[test]
    fn core_hour_products() {
        assert_eq!(core_hours(0.5, 2.0, 4).unwrap(), 4.0);
        assert_eq!(core_hours(1.0, 1.0, 1).unwrap(), 1.0);
        assert_eq!(core_hours(0.0, 5.0, 48).unwrap(), 0.0);
        assert!(matches!(core_hours(1.5, 1.0, 1), Err(Error::Domain(_))));
        assert!(core_hours(0.5, 1.0, 0).is_err());
    }

    #[test]
    fn two_equal_spaced_samples() {
        let rec = PhaseRecord {
            phase: Phase::Training,
            samples: vec![sample(0.0, 1.0), sample(1.0, 3.0)],
            wall_seconds: 1.0,
            computing_units: 1,
        };
        let s = summarize_phase(&rec).unwrap();
        assert_eq!(s.max_memory_gb, 3.0);
        assert!((s.avg_memory_gb - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_and_empty_streams() {
        let mut rec = PhaseRecord {
            phase: Phase::Inference,
            samples: vec![sample(0.3, 2.0)],
            wall_seconds: 0.5,
            computing_units: 2,
        };
        let s = summarize_phase(&rec).unwrap();
        assert_eq!(s.max_memory_gb, s.avg_memory_gb);
        rec.samples.clear();
        let s = summarize_phase(&rec).unwrap();
        assert_eq!(s.core_hours, 0.0);
        assert!(s.warning.is_some());
    }

    #[test]
    fn monitor_collects_samples() {
        let m = ResourceMonitor::start(Phase::Training, Duration::from_millis(10), 1);
        let mut x = 0u64;
        for i in 0..2_000_000u64 {
            x = x.wrapping_add(i * i);
        }
        std::hint::black_box(x);
        std::thread::sleep(Duration::from_millis(40));
        let rec = m.finish();
        assert!(rec.wall_seconds > 0.0);
        if cfg!(target_os = "linux") {
            assert!(rec.samples.len() >= 2);
            assert!(rec.samples.iter().all(|s| s.resident_memory_bytes > 0));
        }
        let s = summarize_phase(&rec).unwrap();
        assert!(s.max_memory_gb >= s.avg_memory_gb);
    }
}
