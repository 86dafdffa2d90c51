//! Running time and resident-memory measurement.
//!
//! RSS is sampled on a background thread at a fixed period. Memory figures
//! use decimal gigabytes (1 GB = 1e9 bytes), and the RAM-time area is the
//! trapezoid rule over the samples, in GB·s.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_PERIOD: Duration = Duration::from_millis(100);
const BYTES_PER_GB: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub t_s: f64,
    pub rss_bytes: u64,
}

/// RSS samples with strictly increasing timestamps, starting at `t = 0`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub samples: Vec<MemorySample>,
    pub sample_period_s: f64,
}

impl MemoryTrace {
    pub fn from_samples(samples: Vec<MemorySample>, sample_period_s: f64) -> Result<Self> {
        if let Some(w) = samples.windows(2).find(|w| !(w[1].t_s > w[0].t_s)) {
            return Err(Error::Internal(format!(
                "trace timestamps {} and {} are not increasing",
                w[0].t_s, w[1].t_s
            )));
        }
        Ok(Self {
            samples,
            sample_period_s,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t_s)
    }

    pub fn max_bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.rss_bytes).max().unwrap_or(0)
    }

    pub fn max_gb(&self) -> f64 {
        self.max_bytes() as f64 / BYTES_PER_GB
    }

    /// Area under the RSS-time curve in GB·s.
    pub fn auc_gbs(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].t_s - w[0].t_s) * (w[0].rss_bytes as f64 + w[1].rss_bytes as f64) * 0.5)
            .sum::<f64>()
            / BYTES_PER_GB
    }

    /// CSV with header `t_s,rss_bytes`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("t_s,rss_bytes\n");
        for s in &self.samples {
            body.push_str(&format!("{:.6},{}\n", s.t_s, s.rss_bytes));
        }
        f.write_all(body.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Resident set size of a process (`None` = this process) from
/// `/proc/<pid>/status`. `None` when unavailable, e.g. after the process
/// exited or on systems without procfs.
pub fn read_rss_bytes(pid: Option<u32>) -> Option<u64> {
    let path = match pid {
        Some(p) => format!("/proc/{p}/status"),
        None => "/proc/self/status".to_string(),
    };
    let text = std::fs::read_to_string(path).ok()?;
    let line = text.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Background sampler. Samples are taken at `t = 0`, then every period,
/// and once more when [`finish`](Self::finish) is called.
pub struct RssSampler<F> {
    start: Instant,
    period: Duration,
    source: std::sync::Arc<F>,
    stop: mpsc::Sender<()>,
    handle: thread::JoinHandle<Vec<MemorySample>>,
}

impl<F> RssSampler<F>
where
    F: Fn() -> Option<u64> + Send + Sync + 'static,
{
    pub fn start(source: F, period: Duration) -> Self {
        let source = std::sync::Arc::new(source);
        let start = Instant::now();
        let first = source().map(|rss| MemorySample { t_s: 0.0, rss_bytes: rss });
        let (stop, rx) = mpsc::channel::<()>();
        let src = source.clone();
        let handle = thread::spawn(move || {
            let mut samples: Vec<MemorySample> = first.into_iter().collect();
            let mut next = period;
            loop {
                let wait = next.saturating_sub(start.elapsed());
                match rx.recv_timeout(wait) {
                    Err(mpsc::RecvTimeoutError::Timeout) => {}
                    _ => break,
                }
                let t_s = start.elapsed().as_secs_f64();
                if let Some(rss) = src() {
                    if samples.last().is_none_or(|s| t_s > s.t_s) {
                        samples.push(MemorySample { t_s, rss_bytes: rss });
                    }
                }
                next += period;
            }
            samples
        });
        Self {
            start,
            period,
            source,
            stop,
            handle,
        }
    }

    /// Stops sampling; the trace ends at the moment of this call.
    pub fn finish(self) -> MemoryTrace {
        let end = self.start.elapsed().as_secs_f64();
        let last = (self.source)();
        let _ = self.stop.send(());
        let mut samples = self.handle.join().unwrap_or_default();
        samples.retain(|s| s.t_s < end);
        if let Some(rss) = last.or_else(|| samples.last().map(|s| s.rss_bytes)) {
            if samples.last().is_none_or(|s| end > s.t_s) {
                samples.push(MemorySample { t_s: end, rss_bytes: rss });
            }
        }
        MemoryTrace {
            samples,
            sample_period_s: self.period.as_secs_f64(),
        }
    }
}

/// Runs `run` while sampling `source`.
pub fn trace_with<R, F>(source: F, period: Duration, run: impl FnOnce() -> R) -> (R, MemoryTrace)
where
    F: Fn() -> Option<u64> + Send + Sync + 'static,
{
    let sampler = RssSampler::start(source, period);
    let out = run();
    (out, sampler.finish())
}

/// Runs `run` while sampling this process's RSS.
pub fn trace_memory<R>(period: Duration, run: impl FnOnce() -> R) -> (R, MemoryTrace) {
    trace_with(|| read_rss_bytes(None), period, run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub case_id: String,
    pub image_shape: [usize; 3],
    pub running_time_s: f64,
    pub max_ram_gb: f64,
    /// Area under the RAM-time curve, GB·s.
    pub total_ram_gbs: f64,
}

impl EfficiencyReport {
    pub fn from_trace(case_id: String, image_shape: [usize; 3], trace: &MemoryTrace) -> Self {
        Self {
            case_id,
            image_shape,
            running_time_s: trace.duration_s(),
            max_ram_gb: trace.max_gb(),
            total_ram_gbs: trace.auc_gbs(),
        }
    }

    /// `total_ram_gbs <= max_ram_gb * running_time_s`, with a relative slack
    /// for rounding.
    pub fn auc_within_bound(&self) -> bool {
        self.total_ram_gbs <= self.max_ram_gb * self.running_time_s * (1.0 + 1e-12)
    }
}
