//! Synthetic rare-pattern dataset: pulse trains in band-limited noise where
//! positives carry a few inverted, widened pulses.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::io::{write_manifest, write_signal, ManifestRow};
use crate::signal::Signal;
use crate::training::{mix_seed, LabeledSample};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub min_frames: usize,
    pub max_frames: usize,
    pub positive_rate: f64,
    pub rate_hz: f64,
    /// Gaussian width (frames) of a regular pulse.
    pub pulse_sigma: f64,
    /// Width multiplier of an anomalous pulse.
    pub anomaly_width: f64,
    pub anomaly_amp: f64,
    pub noise_amp: f64,
    /// Upright wide pulses and inverted narrow pulses, in both classes.
    pub distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            min_frames: 1500,
            max_frames: 3000,
            positive_rate: 0.1,
            rate_hz: 150.0,
            pulse_sigma: 3.0,
            anomaly_width: 2.0,
            anomaly_amp: 1.0,
            noise_amp: 0.15,
            distractors: 2,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(contract_err!("need 1 <= min_frames <= max_frames"));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(contract_err!("positive rate must lie in [0, 1]"));
        }
        if !(self.pulse_sigma > 0.0) || !(self.anomaly_width > 0.0) || !(self.rate_hz > 0.0) {
            return Err(contract_err!("pulse widths and rate must be positive"));
        }
        if 3 * self.footprint() * 10 >= self.min_frames {
            return Err(contract_err!(
                "three anomalies of {} frames would cover 10% of a {}-frame signal",
                self.footprint(),
                self.min_frames
            ));
        }
        Ok(())
    }

    /// Frames covered by one anomalous pulse (±3 widths).
    pub fn footprint(&self) -> usize {
        2 * self.half_width() + 1
    }

    fn half_width(&self) -> usize {
        (3.0 * self.pulse_sigma * self.anomaly_width).ceil() as usize
    }
}

/// A generated sample with the start frame of each injected pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: LabeledSample,
    pub patterns: Vec<usize>,
}

fn add_pulse(x: &mut [f64], center: f64, sigma: f64, amp: f64) {
    let reach = (4.0 * sigma).ceil() as isize;
    let c = center.round() as isize;
    for t in (c - reach).max(0)..(c + reach + 1).min(x.len() as isize) {
        let d = (t as f64 - center) / sigma;
        x[t as usize] += amp * (-0.5 * d * d).exp();
    }
}

fn one_sample(spec: &SynthSpec, seed: u64, index: usize, positive: bool) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, index as u64]));
    let n = rng.gen_range(spec.min_frames..=spec.max_frames);

    // band-limited noise: moving average of uniform noise
    let white: Vec<f64> = (0..n + 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut x: Vec<f64> = white
        .windows(5)
        .map(|w| spec.noise_amp * w.iter().sum::<f64>() / 5.0 * 2.0)
        .collect();

    let period = rng.gen_range(90.0..130.0);
    let mut t = rng.gen_range(0.0..period);
    while t < n as f64 {
        let amp = rng.gen_range(0.9..1.1);
        add_pulse(&mut x, t + rng.gen_range(-3.0..3.0), spec.pulse_sigma, amp);
        t += period;
    }

    let wide = spec.pulse_sigma * spec.anomaly_width;
    let h = spec.half_width();
    for _ in 0..spec.distractors {
        if rng.gen_bool(0.5) {
            let c = rng.gen_range(h..n - h) as f64;
            add_pulse(&mut x, c, wide, spec.anomaly_amp);
        }
        if rng.gen_bool(0.5) {
            let c = rng.gen_range(h..n - h) as f64;
            add_pulse(&mut x, c, spec.pulse_sigma, -spec.anomaly_amp);
        }
    }

    let mut patterns = Vec::new();
    if positive {
        let k = rng.gen_range(1..=3);
        for _ in 0..k {
            let start = rng.gen_range(0..n - spec.footprint());
            add_pulse(&mut x, (start + h) as f64, wide, -spec.anomaly_amp);
            patterns.push(start);
        }
        patterns.sort_unstable();
    }
    let signal = Signal::mono(x, spec.rate_hz).expect("generated values are finite");
    SynthSample {
        sample: LabeledSample::new(format!("s{index:05}"), signal, usize::from(positive)),
        patterns,
    }
}

/// Generates `n` samples in memory. Exactly `round(n · positive_rate)` are
/// positive; which ones is fixed by `seed`.
pub fn synth_dataset(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    if n < 2 {
        return Err(contract_err!("need at least 2 samples, got {n}"));
    }
    let n_pos = (n as f64 * spec.positive_rate).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, u64::MAX])));
    let mut positive = vec![false; n];
    for &i in &idx[..n_pos] {
        positive[i] = true;
    }
    Ok((0..n).map(|i| one_sample(spec, seed, i, positive[i])).collect())
}

/// Writes signals, `manifest.csv` and `patterns.csv` (id, start, width) to `out_dir`.
pub fn gen_synthetic(out_dir: &Path, n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<ManifestRow>> {
    let data = synth_dataset(n, seed, spec)?;
    let sig_dir = out_dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
    let mut rows = Vec::with_capacity(n);
    let mut patterns = String::from("id,start,width\n");
    for s in &data {
        let rel = Path::new("signals").join(format!("{}.txt", s.sample.id));
        write_signal(&out_dir.join(&rel), &s.sample.signal)?;
        rows.push(ManifestRow {
            id: s.sample.id.clone(),
            label: s.sample.binary_class(1),
            path: rel,
        });
        for p in &s.patterns {
            patterns += &format!("{},{},{}\n", s.sample.id, p, spec.footprint());
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    let pp = out_dir.join("patterns.csv");
    fs::write(&pp, patterns).map_err(|e| Error::io(&pp, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_positive_count_and_determinism() {
        let spec = SynthSpec {
            positive_rate: 0.05,
            max_frames: 1600,
            ..Default::default()
        };
        let a = synth_dataset(1000, 4, &spec).unwrap();
        assert_eq!(a.iter().filter(|s| s.sample.binary_class(1) == 1).count(), 50);
        let b = synth_dataset(1000, 4, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(1000, 5, &spec).unwrap());
    }

    #[test]
    fn lengths_in_range() {
        let spec = SynthSpec::default();
        for s in synth_dataset(40, 1, &spec).unwrap() {
            let n = s.sample.signal.frames();
            assert!((1500..=3000).contains(&n));
            assert!(s.patterns.len() * spec.footprint() * 10 < n);
        }
    }
}
