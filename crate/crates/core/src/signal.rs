//! Multichannel signals and the preprocessing / cropping pipeline.
//!
//! Crop start offsets are 0-based everywhere in this crate except
//! [`Bag::starts_one_based`], which reports them the way they are usually
//! written down (first frame = 1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

/// `channels × frames` samples, row-major by channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    channels: usize,
    frames: usize,
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl Signal {
    pub fn new(channels: usize, samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if channels == 0 || samples.is_empty() || !samples.len().is_multiple_of(channels) {
            return Err(contract_err!(
                "{} samples cannot form {channels} non-empty channels",
                samples.len()
            ));
        }
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(contract_err!("sample rate must be positive, got {sample_rate_hz}"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample {} at flat index {i}",
                samples[i]
            )));
        }
        Ok(Signal {
            channels,
            frames: samples.len() / channels,
            samples,
            sample_rate_hz,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        Self::new(1, samples, sample_rate_hz)
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, sample_rate_hz: f64) -> Result<Self> {
        let frames = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != frames) {
            return Err(contract_err!("channels have different lengths"));
        }
        let n = channels.len();
        Self::new(n, channels.concat(), sample_rate_hz)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.samples[i * self.frames..(i + 1) * self.frames]
    }

    /// Frames `[start, start + len)` of every channel.
    pub fn window(&self, start: usize, len: usize) -> Result<Signal> {
        if len == 0 || start + len > self.frames {
            return Err(contract_err!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.frames
            ));
        }
        let samples = (0..self.channels)
            .flat_map(|c| self.channel(c)[start..start + len].iter().copied())
            .collect();
        Ok(Signal {
            channels: self.channels,
            frames: len,
            samples,
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.channels, self.frames, self.samples.clone()).expect("signal extents are positive")
    }

    fn map_channels(&self, frames: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Signal {
        let samples = (0..self.channels).flat_map(|c| f(self.channel(c))).collect();
        Signal {
            channels: self.channels,
            frames,
            samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Overlapping,
    /// Sliding window whose stride equals its width.
    NonOverlapping,
    /// Exactly `n` windows, evenly spaced from the first to the last frame.
    FixedCount(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub window: usize,
    pub stride: usize,
    /// Drop the final, end-aligned crop when `(frames - window)` is not a
    /// multiple of the stride.
    pub drop_tail: bool,
    pub mode: CropMode,
}

impl CropSpec {
    pub fn overlapping(window: usize, stride: usize, drop_tail: bool) -> Self {
        CropSpec {
            window,
            stride,
            drop_tail,
            mode: CropMode::Overlapping,
        }
    }

    /// A single crop spanning an input of `frames` frames.
    pub fn whole(frames: usize) -> Self {
        Self::overlapping(frames, 1, true)
    }

    /// 0-based crop starts over an input of `frames` frames.
    pub fn starts(&self, frames: usize) -> Result<Vec<usize>> {
        let w1 = self.window;
        if w1 == 0 || self.stride == 0 {
            return Err(contract_err!(
                "crop window and stride must be at least 1 (window {w1}, stride {})",
                self.stride
            ));
        }
        if w1 > frames {
            return Err(contract_err!("crop window {w1} is wider than the {frames}-frame input"));
        }
        let span = frames - w1;
        let sliding = |s: usize| {
            let mut starts: Vec<usize> = (0..=span / s).map(|k| k * s).collect();
            if !span.is_multiple_of(s) && !self.drop_tail {
                starts.push(span);
            }
            starts
        };
        Ok(match self.mode {
            CropMode::Overlapping => sliding(self.stride),
            CropMode::NonOverlapping => sliding(w1),
            CropMode::FixedCount(0) => return Err(contract_err!("fixed crop count must be at least 1")),
            CropMode::FixedCount(1) => vec![0],
            CropMode::FixedCount(n) => {
                if n - 1 > span {
                    return Err(contract_err!(
                        "{n} distinct crops of width {w1} do not fit {frames} frames"
                    ));
                }
                (0..n)
                    .map(|k| ((k * span) as f64 / (n - 1) as f64).round() as usize)
                    .collect()
            }
        })
    }
}

/// Crops cut from one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub crops: Vec<Signal>,
    /// 0-based start frame of each crop in the source.
    pub offsets: Vec<usize>,
    pub source_id: String,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn starts_one_based(&self) -> Vec<usize> {
        self.offsets.iter().map(|s| s + 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    /// Largest 1-based start frame that may be drawn.
    pub offset: usize,
    pub enabled: bool,
}

/// Appends the first `pad` frames to the end of the signal.
pub fn replication_pad(signal: &Signal, pad: usize) -> Result<Signal> {
    let n = signal.frames;
    if pad > n {
        return Err(contract_err!(
            "replication padding length {pad} exceeds the {n}-frame signal"
        ));
    }
    Ok(signal.map_channels(n + pad, |ch| {
        let mut out = ch.to_vec();
        out.extend_from_slice(&ch[..pad]);
        out
    }))
}

/// Drops the first `b - 1` frames (`b` is 1-based).
pub fn shift_start(signal: &Signal, b: usize) -> Result<Signal> {
    if b == 0 || b > signal.frames {
        return Err(contract_err!("start frame {b} outside [1, {}]", signal.frames));
    }
    signal.window(b - 1, signal.frames - b + 1)
}

/// Random start shift for training; returns the shifted signal and the drawn `b`.
pub fn random_crop_augment(signal: &Signal, spec: AugmentSpec, seed: u64) -> Result<(Signal, usize)> {
    if spec.offset == 0 || spec.offset > signal.frames {
        return Err(contract_err!(
            "augmentation offset {} outside [1, {}]",
            spec.offset,
            signal.frames
        ));
    }
    if !spec.enabled {
        return Ok((signal.clone(), 1));
    }
    let b = ChaCha8Rng::seed_from_u64(seed).gen_range(1..=spec.offset);
    Ok((shift_start(signal, b)?, b))
}

pub fn sliding_window_crops(signal: &Signal, spec: &CropSpec) -> Result<Bag> {
    let offsets = spec.starts(signal.frames)?;
    let crops = offsets
        .iter()
        .map(|&s| signal.window(s, spec.window))
        .collect::<Result<_>>()?;
    Ok(Bag {
        crops,
        offsets,
        source_id: String::new(),
    })
}

/// Linear-interpolation resampling to `target_hz`.
pub fn resample(signal: &Signal, target_hz: f64) -> Result<Signal> {
    if !(target_hz > 0.0) || !target_hz.is_finite() {
        return Err(contract_err!("target rate must be positive, got {target_hz}"));
    }
    if let Some(v) = signal.samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot resample non-finite sample {v}")));
    }
    let n = signal.frames;
    let ratio = signal.sample_rate_hz / target_hz;
    let out_frames = ((n as f64 * target_hz / signal.sample_rate_hz).round() as usize).max(1);
    let mut out = signal.map_channels(out_frames, |ch| {
        (0..out_frames)
            .map(|k| {
                let pos = k as f64 * ratio;
                let i0 = pos.floor() as usize;
                if i0 + 1 >= n {
                    return ch[n - 1];
                }
                let frac = pos - i0 as f64;
                if frac == 0.0 {
                    ch[i0]
                } else {
                    ch[i0] + frac * (ch[i0 + 1] - ch[i0])
                }
            })
            .collect()
    });
    out.sample_rate_hz = target_hz;
    Ok(out)
}

/// Normalised biquad coefficients `[b0, b1, b2, a1, a2]` (`a0 = 1`).
type Biquad = [f64; 5];

fn butterworth_section(cutoff_hz: f64, rate_hz: f64, highpass: bool) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / rate_hz;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
    let a0 = 1.0 + alpha;
    let (b0, b1) = if highpass {
        ((1.0 + cos) / 2.0, -(1.0 + cos))
    } else {
        ((1.0 - cos) / 2.0, 1.0 - cos)
    };
    [b0 / a0, b1 / a0, b0 / a0, -2.0 * cos / a0, (1.0 - alpha) / a0]
}

/// Runs the cascade over `x` starting from the steady state of a constant
/// input equal to `x[0]`.
fn sos_filter(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut scale = x[0];
    let mut state: Vec<[f64; 2]> = sections
        .iter()
        .map(|&[b0, b1, b2, a1, a2]| {
            let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let zi = [scale * (gain - b0), scale * (b2 - a2 * gain)];
            scale *= gain;
            zi
        })
        .collect();
    x.iter()
        .map(|&input| {
            let mut v = input;
            for (&[b0, b1, b2, a1, a2], z) in sections.iter().zip(state.iter_mut()) {
                let y = b0 * v + z[0];
                z[0] = b1 * v - a1 * y + z[1];
                z[1] = b2 * v - a2 * y;
                v = y;
            }
            v
        })
        .collect()
}

fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * (2 * sections.len() + 1)).min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let mut y = sos_filter(sections, &ext);
    y.reverse();
    let mut y = sos_filter(sections, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Zero-phase band-pass: second-order Butterworth high-pass at `lo_hz`
/// cascaded with a second-order Butterworth low-pass at `hi_hz`, run
/// forward and backward over every channel.
pub fn bandpass(signal: &Signal, lo_hz: f64, hi_hz: f64) -> Result<Signal> {
    let nyquist = signal.sample_rate_hz / 2.0;
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < nyquist) {
        return Err(contract_err!(
            "passband [{lo_hz}, {hi_hz}] Hz must satisfy 0 < lo < hi < {nyquist} Hz (Nyquist)"
        ));
    }
    let sections = [
        butterworth_section(lo_hz, signal.sample_rate_hz, true),
        butterworth_section(hi_hz, signal.sample_rate_hz, false),
    ];
    Ok(signal.map_channels(signal.frames, |ch| filtfilt(&sections, ch)))
}

/// Extends every channel to `target_frames` with uniform noise in `[0, 0.1]`.
pub fn noise_pad_to_length(signal: &Signal, target_frames: usize, seed: u64) -> Result<Signal> {
    let n = signal.frames;
    if n > target_frames {
        return Err(contract_err!(
            "signal has {n} frames, more than the target length {target_frames}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(signal.map_channels(target_frames, |ch| {
        let mut out = ch.to_vec();
        out.extend((n..target_frames).map(|_| rng.gen_range(0.0..=0.1)));
        out
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ramp(n: usize) -> Signal {
        Signal::mono((0..n).map(|v| v as f64).collect(), 150.0).unwrap()
    }

    #[test]
    fn replication_pad_examples() {
        let s = ramp(5);
        let p = replication_pad(&s, 3).unwrap();
        assert_eq!(p.samples(), &[0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0]);
        assert_eq!(replication_pad(&s, 0).unwrap(), s);
        let full = replication_pad(&s, 5).unwrap();
        assert_eq!(full.samples(), [s.samples(), s.samples()].concat().as_slice());
        assert!(matches!(replication_pad(&s, 6), Err(Error::Contract(_))));
    }

    #[test]
    fn replication_pad_multichannel() {
        let s = Signal::from_channels(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], 100.0).unwrap();
        let p = replication_pad(&s, 2).unwrap();
        assert_eq!(p.channel(0), &[1.0, 2.0, 3.0, 1.0, 2.0]);
        assert_eq!(p.channel(1), &[4.0, 5.0, 6.0, 4.0, 5.0]);
    }

    #[test]
    fn augment_examples() {
        let s = ramp(10);
        let spec = AugmentSpec {
            offset: 1,
            enabled: true,
        };
        let (out, b) = random_crop_augment(&s, spec, 7).unwrap();
        assert_eq!((b, &out), (1, &s));

        let shifted = shift_start(&s, 4).unwrap();
        assert_eq!(shifted.frames(), 7);
        assert_eq!(shifted.samples()[0], 3.0);

        let spec = AugmentSpec {
            offset: 6,
            enabled: true,
        };
        let a = random_crop_augment(&s, spec, 99).unwrap();
        let b = random_crop_augment(&s, spec, 99).unwrap();
        assert_eq!(a, b);
        assert!((1..=6).contains(&a.1));
        assert_eq!(a.0.frames(), 10 - a.1 + 1);

        let too_far = AugmentSpec {
            offset: 11,
            enabled: true,
        };
        assert!(random_crop_augment(&s, too_far, 0).is_err());
    }

    #[test]
    fn sliding_window_reference_layout() {
        let s = Signal::mono(vec![0.0; 3000], 150.0).unwrap();
        let bag = sliding_window_crops(&s, &CropSpec::overlapping(1200, 257, true)).unwrap();
        assert_eq!(bag.starts_one_based(), vec![1, 258, 515, 772, 1029, 1286, 1543, 1800]);
        assert!(bag.crops.iter().all(|c| c.frames() == 1200));
    }

    #[test]
    fn sliding_window_tail_and_identity() {
        let s = ramp(11);
        let bag = sliding_window_crops(&s, &CropSpec::overlapping(4, 3, false)).unwrap();
        assert_eq!(bag.starts_one_based(), vec![1, 4, 7, 8]);
        assert_eq!(bag.crops[3].samples(), &[7.0, 8.0, 9.0, 10.0]);

        let one = sliding_window_crops(&s, &CropSpec::overlapping(11, 5, false)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.crops[0], s);

        assert!(sliding_window_crops(&s, &CropSpec::overlapping(12, 1, true)).is_err());
    }

    #[test]
    fn other_crop_modes() {
        let non = CropSpec {
            window: 4,
            stride: 1,
            drop_tail: false,
            mode: CropMode::NonOverlapping,
        };
        assert_eq!(non.starts(11).unwrap(), vec![0, 4, 7]);
        let fixed = CropSpec {
            window: 4,
            stride: 1,
            drop_tail: true,
            mode: CropMode::FixedCount(3),
        };
        assert_eq!(fixed.starts(11).unwrap(), vec![0, 4, 7]);
        let fixed = CropSpec {
            window: 4,
            stride: 1,
            drop_tail: true,
            mode: CropMode::FixedCount(1),
        };
        assert_eq!(fixed.starts(11).unwrap(), vec![0]);
        let crowded = CropSpec {
            window: 10,
            stride: 1,
            drop_tail: true,
            mode: CropMode::FixedCount(5),
        };
        assert!(crowded.starts(11).is_err());
    }

    #[test]
    fn resample_examples() {
        let s = Signal::mono((0..50).map(|v| (v as f64 * 0.3).sin()).collect(), 150.0).unwrap();
        assert_eq!(resample(&s, 150.0).unwrap(), s);

        let c = Signal::mono(vec![2.5; 5000], 500.0).unwrap();
        let r = resample(&c, 150.0).unwrap();
        assert_eq!(r.frames(), 1500);
        assert_eq!(r.sample_rate_hz(), 150.0);
        assert!(r.samples().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn resample_interpolates_linearly() {
        let s = Signal::mono(vec![0.0, 1.0, 2.0, 3.0], 100.0).unwrap();
        let up = resample(&s, 200.0).unwrap();
        assert_eq!(up.frames(), 8);
        assert_eq!(&up.samples()[..7], &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn bandpass_removes_dc() {
        let s = Signal::mono(vec![1.7; 3000], 150.0).unwrap();
        let f = bandpass(&s, 0.5, 50.0).unwrap();
        let tail = &f.samples()[300..2700];
        assert!(
            tail.iter().all(|v| v.abs() < 1e-3 * 1.7),
            "max {:?}",
            tail.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()))
        );
    }

    #[test]
    fn bandpass_keeps_passband_sine() {
        let rate = 150.0;
        let s = Signal::mono(
            (0..3000).map(|k| (2.0 * PI * 10.0 * k as f64 / rate).sin()).collect(),
            rate,
        )
        .unwrap();
        let f = bandpass(&s, 0.5, 50.0).unwrap();
        let peak = f.samples()[600..2400].iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!((peak - 1.0).abs() < 0.05, "peak {peak}");
    }

    #[test]
    fn bandpass_rejects_band_above_nyquist() {
        let s = ramp(100);
        assert!(matches!(bandpass(&s, 0.5, 75.0), Err(Error::Contract(_))));
        assert!(matches!(bandpass(&s, 70.0, 80.0), Err(Error::Contract(_))));
        assert!(matches!(bandpass(&s, 5.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn bandpass_attenuates_70hz() {
        let rate = 150.0;
        let s = Signal::mono(
            (0..3000).map(|k| (2.0 * PI * 70.0 * k as f64 / rate).sin()).collect(),
            rate,
        )
        .unwrap();
        let f = bandpass(&s, 0.5, 50.0).unwrap();
        let peak = f.samples()[600..2400].iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(peak < 0.05, "peak {peak}");
    }

    #[test]
    fn noise_pad_examples() {
        let s = Signal::mono(vec![0.5; 1500], 150.0).unwrap();
        assert_eq!(noise_pad_to_length(&s, 1500, 3).unwrap(), s);
        let p = noise_pad_to_length(&s, 3000, 3).unwrap();
        assert_eq!(p.frames(), 3000);
        assert_eq!(&p.samples()[..1500], s.samples());
        assert!(p.samples()[1500..].iter().all(|v| (0.0..=0.1).contains(v)));
        assert_eq!(p, noise_pad_to_length(&s, 3000, 3).unwrap());
        assert!(noise_pad_to_length(&s, 1000, 3).is_err());
    }

    #[test]
    fn signal_rejects_non_finite() {
        assert!(matches!(Signal::mono(vec![1.0, f64::NAN], 1.0), Err(Error::Numeric(_))));
        assert!(Signal::mono(vec![], 1.0).is_err());
    }
}
