//! Virtual Hanbury Brown–Twiss apparatus.
//!
//! A composite photon record is routed through a 50:50 beamsplitter and the
//! two channels are correlated with the counting estimator
//!
//! ```text
//! g2(k dt) = <n1(t) n2(t + k dt)> / (<n1> <n2>)
//! ```
//!
//! where `n1`, `n2` are photon counts per bin of width `dt`. The numerator
//! averages over bin positions whose shifted partner lies inside the record;
//! the denominator uses full-record means.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photon_engine::TimestampStream;

/// Upper clip applied to g2(0) before inversion: `g2 <= 1 - EPSILON`.
pub const N_MEAS_CLIP_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub bin_width_ns: f64,
    pub max_lag_ns: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            bin_width_ns: 1.0,
            max_lag_ns: 100.0,
        }
    }
}

impl CorrelationConfig {
    pub fn new(bin_width_ns: f64, max_lag_ns: f64) -> Result<Self> {
        let config = Self {
            bin_width_ns,
            max_lag_ns,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_ns.is_finite() && self.bin_width_ns > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bin_width_ns must be positive, got {}",
                self.bin_width_ns
            )));
        }
        if !(self.max_lag_ns.is_finite() && self.max_lag_ns >= self.bin_width_ns) {
            return Err(Error::InvalidParameter(format!(
                "max_lag_ns ({}) must be at least bin_width_ns ({})",
                self.max_lag_ns, self.bin_width_ns
            )));
        }
        Ok(())
    }

    /// Number of lag bins on each side of zero.
    pub fn half_bins(&self) -> usize {
        ((self.max_lag_ns / self.bin_width_ns).round() as usize).max(1)
    }
}

/// Binned g2 estimate over symmetric lags `-K dt ..= K dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCurve {
    pub lags_ns: Vec<f64>,
    pub g2_values: Vec<f64>,
    pub coincidence_counts: Vec<u64>,
}

impl CorrelationCurve {
    pub fn len(&self) -> usize {
        self.lags_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags_ns.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.lags_ns.len() / 2
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut text = String::from("lag_ns,g2,coincidences\n");
        for ((lag, g2), count) in self
            .lags_ns
            .iter()
            .zip(&self.g2_values)
            .zip(&self.coincidence_counts)
        {
            text.push_str(&format!("{lag},{g2},{count}\n"));
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }
}

/// Route each photon to channel 1 or 2 with probability 1/2.
pub fn split_beamsplitter<R: Rng + ?Sized>(
    stream: &TimestampStream,
    rng: &mut R,
) -> (TimestampStream, TimestampStream) {
    let times = stream.times();
    let mut ch1 = Vec::with_capacity(times.len() / 2 + 64);
    let mut ch2 = Vec::with_capacity(times.len() / 2 + 64);
    // One 64-bit draw routes 64 photons.
    for chunk in times.chunks(64) {
        let bits: u64 = rng.random();
        for (i, &t) in chunk.iter().enumerate() {
            if bits >> i & 1 == 0 {
                ch1.push(t);
            } else {
                ch2.push(t);
            }
        }
    }
    let d = stream.duration_ns();
    (
        TimestampStream::from_sorted(ch1, d),
        TimestampStream::from_sorted(ch2, d),
    )
}

/// Bin indices of the photons that fall inside the `record_bins` full bins.
fn bin_indices(stream: &TimestampStream, bin_width_ns: f64, record_bins: i64) -> Vec<i64> {
    stream
        .times()
        .iter()
        .map(|&t| (t / bin_width_ns).floor() as i64)
        .take_while(|&b| b < record_bins)
        .collect()
}

struct Binned {
    ch1: Vec<i64>,
    ch2: Vec<i64>,
    record_bins: i64,
}

fn bin_channels(ch1: &TimestampStream, ch2: &TimestampStream, bin_width_ns: f64) -> Result<Binned> {
    if ch1.duration_ns() != ch2.duration_ns() {
        return Err(Error::DurationMismatch {
            expected: ch1.duration_ns(),
            found: ch2.duration_ns(),
        });
    }
    if ch1.is_empty() || ch2.is_empty() {
        return Err(Error::UndefinedCorrelation("a channel recorded no photons"));
    }
    let record_bins = (ch1.duration_ns() / bin_width_ns).floor() as i64;
    if record_bins < 1 {
        return Err(Error::UndefinedCorrelation("record shorter than one bin"));
    }
    let binned = Binned {
        ch1: bin_indices(ch1, bin_width_ns, record_bins),
        ch2: bin_indices(ch2, bin_width_ns, record_bins),
        record_bins,
    };
    if binned.ch1.is_empty() || binned.ch2.is_empty() {
        return Err(Error::UndefinedCorrelation(
            "a channel recorded no photons in complete bins",
        ));
    }
    Ok(binned)
}

fn normalize(pairs: u64, lag_bins: i64, binned: &Binned) -> f64 {
    let m = binned.record_bins as f64;
    let mean1 = binned.ch1.len() as f64 / m;
    let mean2 = binned.ch2.len() as f64 / m;
    let product_mean = pairs as f64 / (binned.record_bins - lag_bins.abs()) as f64;
    product_mean / (mean1 * mean2)
}

/// Full binned correlation curve between two channels.
pub fn compute_g2(
    ch1: &TimestampStream,
    ch2: &TimestampStream,
    config: &CorrelationConfig,
) -> Result<CorrelationCurve> {
    config.validate()?;
    let binned = bin_channels(ch1, ch2, config.bin_width_ns)?;
    let k = config.half_bins() as i64;
    if binned.record_bins <= k {
        return Err(Error::InvalidParameter(format!(
            "record of {} bins cannot support a lag range of +/-{k} bins",
            binned.record_bins
        )));
    }

    let mut counts = vec![0u64; (2 * k + 1) as usize];
    let mut lo = 0usize;
    for &b1 in &binned.ch1 {
        while lo < binned.ch2.len() && binned.ch2[lo] < b1 - k {
            lo += 1;
        }
        for &b2 in &binned.ch2[lo..] {
            let lag = b2 - b1;
            if lag > k {
                break;
            }
            counts[(lag + k) as usize] += 1;
        }
    }

    let lags_ns = (-k..=k).map(|j| j as f64 * config.bin_width_ns).collect();
    let g2_values = (-k..=k)
        .zip(&counts)
        .map(|(j, &c)| normalize(c, j, &binned))
        .collect();
    Ok(CorrelationCurve {
        lags_ns,
        g2_values,
        coincidence_counts: counts,
    })
}

/// Zero-lag bin of [`compute_g2`] without building the rest of the histogram.
pub fn zero_delay_g2(
    ch1: &TimestampStream,
    ch2: &TimestampStream,
    bin_width_ns: f64,
) -> Result<f64> {
    if !(bin_width_ns.is_finite() && bin_width_ns > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bin_width_ns must be positive, got {bin_width_ns}"
        )));
    }
    let binned = bin_channels(ch1, ch2, bin_width_ns)?;
    let (a, b) = (&binned.ch1, &binned.ch2);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pairs = 0u64;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let bin = a[i];
                let i0 = i;
                while i < a.len() && a[i] == bin {
                    i += 1;
                }
                let j0 = j;
                while j < b.len() && b[j] == bin {
                    j += 1;
                }
                pairs += ((i - i0) * (j - j0)) as u64;
            }
        }
    }
    Ok(normalize(pairs, 0, &binned))
}

pub fn g2_zero(curve: &CorrelationCurve) -> f64 {
    curve.g2_values[curve.zero_index()]
}

/// Effective emitter number `1 / (1 - g2(0))`, with g2(0) clipped to
/// `[0, 1 - N_MEAS_CLIP_EPSILON]` so the result lies in `[1, 1000]`.
/// NaN propagates.
pub fn n_meas_from_g2(g2_0: f64) -> f64 {
    let clipped = g2_0.clamp(0.0, 1.0 - N_MEAS_CLIP_EPSILON);
    1.0 / (1.0 - clipped)
}

/// Split and correlate once per bin width, returning `(width, g2(0))` pairs.
pub fn g2_zero_vs_binwidth<R: Rng + ?Sized>(
    stream: &TimestampStream,
    bin_widths: &[f64],
    max_lag_ns: f64,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if stream.is_empty() {
        return Err(Error::UndefinedCorrelation("empty photon record"));
    }
    bin_widths
        .iter()
        .map(|&width| {
            CorrelationConfig::new(width, max_lag_ns.max(width))?;
            let (ch1, ch2) = split_beamsplitter(stream, rng);
            Ok((width, zero_delay_g2(&ch1, &ch2, width)?))
        })
        .collect()
}
