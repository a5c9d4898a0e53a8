//! Renewal-process photon emission.
//!
//! Inter-photon delays follow the density
//!
//! ```text
//! p(dt) ∝ exp(-dt / tau) * (1 - exp(-R dt))
//! ```
//!
//! where `tau` is the excited-state lifetime and `R` the re-excitation rate.
//! Streams are sequences of continuous timestamps in nanoseconds; they are
//! only discretized when a correlation histogram is built.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive rejections after which the sampler gives up.
pub const REJECTION_CAP: u64 = 1_000_000;

/// Photophysics of a single emitter and the length of the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitterPhysics {
    pub lifetime_ns: f64,
    pub reexcitation_rate_per_ns: f64,
    pub acquisition_ns: f64,
}

impl Default for EmitterPhysics {
    fn default() -> Self {
        Self {
            lifetime_ns: 14.0,
            reexcitation_rate_per_ns: 1.0 / 14.0,
            acquisition_ns: 1e8,
        }
    }
}

impl EmitterPhysics {
    pub fn new(
        lifetime_ns: f64,
        reexcitation_rate_per_ns: f64,
        acquisition_ns: f64,
    ) -> Result<Self> {
        let physics = Self {
            lifetime_ns,
            reexcitation_rate_per_ns,
            acquisition_ns,
        };
        physics.validate()?;
        Ok(physics)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lifetime_ns", self.lifetime_ns),
            ("reexcitation_rate_per_ns", self.reexcitation_rate_per_ns),
            ("acquisition_ns", self.acquisition_ns),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_acquisition(mut self, acquisition_ns: f64) -> Self {
        self.acquisition_ns = acquisition_ns;
        self
    }

    /// Integral of the density as literally written with its `1/tau` prefactor.
    /// This equals `R tau / (R tau + 1)`, which is why the sampler normalizes.
    pub fn unnormalized_mass(&self) -> f64 {
        let rt = self.reexcitation_rate_per_ns * self.lifetime_ns;
        rt / (rt + 1.0)
    }

    /// Normalized inter-photon delay density.
    pub fn delay_pdf(&self, dt: f64) -> f64 {
        if dt < 0.0 {
            return 0.0;
        }
        let tau = self.lifetime_ns;
        (-dt / tau).exp() * -(-self.reexcitation_rate_per_ns * dt).exp_m1()
            / (tau * self.unnormalized_mass())
    }

    /// Closed-form CDF of the normalized delay density.
    pub fn delay_cdf(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 0.0;
        }
        let a = 1.0 / self.lifetime_ns;
        let c = a + self.reexcitation_rate_per_ns;
        let num = -(-a * dt).exp_m1() / a + (-c * dt).exp_m1() / c;
        num / (1.0 / a - 1.0 / c)
    }

    /// Mean inter-photon delay, `tau + 1 / (R + 1/tau)`.
    pub fn mean_delay_ns(&self) -> f64 {
        let a = 1.0 / self.lifetime_ns;
        self.lifetime_ns + 1.0 / (a + self.reexcitation_rate_per_ns)
    }
}

/// Sorted photon timestamps (ns) over a record of fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestampStream {
    times_ns: Vec<f64>,
    duration_ns: f64,
}

impl TimestampStream {
    pub fn new(times_ns: Vec<f64>, duration_ns: f64) -> Result<Self> {
        if !(duration_ns.is_finite() && duration_ns > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stream duration must be positive, got {duration_ns}"
            )));
        }
        if times_ns
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt()))
        {
            return Err(Error::InvalidParameter(
                "timestamps must be non-decreasing".into(),
            ));
        }
        if let (Some(&first), Some(&last)) = (times_ns.first(), times_ns.last()) {
            if first < 0.0 || last > duration_ns {
                return Err(Error::InvalidParameter(format!(
                    "timestamps must lie in [0, {duration_ns}], found range [{first}, {last}]"
                )));
            }
        }
        Ok(Self {
            times_ns,
            duration_ns,
        })
    }

    pub fn empty(duration_ns: f64) -> Self {
        Self {
            times_ns: Vec::new(),
            duration_ns,
        }
    }

    // Callers guarantee ordering and range.
    pub(crate) fn from_sorted(times_ns: Vec<f64>, duration_ns: f64) -> Self {
        debug_assert!(times_ns.windows(2).all(|w| w[0] <= w[1]));
        Self {
            times_ns,
            duration_ns,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times_ns
    }

    pub fn duration_ns(&self) -> f64 {
        self.duration_ns
    }

    pub fn len(&self) -> usize {
        self.times_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ns.is_empty()
    }

    pub fn into_times(self) -> Vec<f64> {
        self.times_ns
    }

    /// Text dump: a `# duration_ns=<value>` header, then one timestamp per line.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::with_capacity(16 * self.len() + 32);
        writeln!(buf, "# duration_ns={}", self.duration_ns).expect("write to String");
        for t in &self.times_ns {
            writeln!(buf, "{t}").expect("write to String");
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_dump<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty timestamp dump".into()))??;
        let duration_ns = header
            .trim()
            .strip_prefix("# duration_ns=")
            .ok_or_else(|| Error::Parse(format!("bad dump header: {header:?}")))?
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("bad duration: {e}")))?;
        let mut times = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            times.push(
                line.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad timestamp {line:?}: {e}")))?,
            );
        }
        Self::new(times, duration_ns)
    }
}

/// Draw one inter-photon delay.
///
/// Candidates come from the lifetime exponential and are accepted with
/// probability `1 - exp(-R x)`. The acceptance test is drawn as
/// `Exp(1) < R x`, which has exactly that probability.
pub fn sample_interphoton_delay<R: Rng + ?Sized>(
    physics: &EmitterPhysics,
    rng: &mut R,
) -> Result<f64> {
    let tau = physics.lifetime_ns;
    let rate = physics.reexcitation_rate_per_ns;
    for _ in 0..REJECTION_CAP {
        let candidate = tau * rng.sample::<f64, _>(Exp1);
        let threshold: f64 = rng.sample(Exp1);
        if threshold < rate * candidate {
            return Ok(candidate);
        }
    }
    Err(Error::RejectionCapExceeded(REJECTION_CAP))
}

/// Emission times of one emitter over `[0, acquisition_ns]`.
pub fn generate_stream<R: Rng + ?Sized>(
    physics: &EmitterPhysics,
    rng: &mut R,
) -> Result<TimestampStream> {
    physics.validate()?;
    let expected = (physics.acquisition_ns / physics.mean_delay_ns()).ceil() as usize;
    let mut times = Vec::with_capacity(expected + expected / 64 + 16);
    let mut t = 0.0;
    loop {
        t += sample_interphoton_delay(physics, rng)?;
        if t > physics.acquisition_ns {
            break;
        }
        times.push(t);
    }
    Ok(TimestampStream::from_sorted(times, physics.acquisition_ns))
}

/// Time-sorted union of streams recorded over the same duration.
pub fn merge_streams(streams: &[TimestampStream]) -> Result<TimestampStream> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot merge an empty list of streams".into()))?;
    let duration = first.duration_ns;
    if let Some(bad) = streams.iter().find(|s| s.duration_ns != duration) {
        return Err(Error::DurationMismatch {
            expected: duration,
            found: bad.duration_ns,
        });
    }
    let mut layer: Vec<Vec<f64>> = streams.iter().map(|s| s.times_ns.clone()).collect();
    while layer.len() > 1 {
        let mut next = Vec::with_capacity(layer.len().div_ceil(2));
        let mut it = layer.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge_two(&a, &b)),
                None => next.push(a),
            }
        }
        layer = next;
    }
    Ok(TimestampStream::from_sorted(
        layer.pop().unwrap_or_default(),
        duration,
    ))
}

fn merge_two(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Keep each timestamp independently with probability `keep_probability`.
pub fn thin_stream<R: Rng + ?Sized>(
    stream: &TimestampStream,
    keep_probability: f64,
    rng: &mut R,
) -> Result<TimestampStream> {
    if !(0.0..=1.0).contains(&keep_probability) {
        return Err(Error::InvalidProbability(keep_probability));
    }
    let kept = if keep_probability == 1.0 {
        stream.times_ns.clone()
    } else if keep_probability == 0.0 {
        Vec::new()
    } else {
        stream
            .times_ns
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < keep_probability)
            .collect()
    };
    Ok(TimestampStream::from_sorted(kept, stream.duration_ns))
}
