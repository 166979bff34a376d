//! Noisy-speech simulation: reverberation, interfering speech and
//! background noise mixed at a controlled SNR.

mod simulate;
pub mod wav;

pub use wav::{read_wav, write_wav};

pub use simulate::{
    sample_corruption, simulate_noisy, synthetic_ir, CorruptionRanges, CorruptionSpec, Pools,
    Provenance,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono waveform with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition("audio clip is empty".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Precondition("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Precondition(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Room impulse response; applied by linear convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl ImpulseResponse {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let clip = AudioClip::new(samples, sample_rate_hz)?;
        Ok(Self {
            samples: clip.samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    /// Unit impulse delayed by `delay` samples.
    pub fn delta(delay: usize, sample_rate_hz: u32) -> Result<Self> {
        let mut s = vec![0.0; delay + 1];
        s[delay] = 1.0;
        Self::new(s, sample_rate_hz)
    }
}

/// Mean-square power `(1/n) Σ x²`.
pub fn measure_power(clip: &AudioClip) -> f64 {
    power_of(clip.samples())
}

fn power_of(samples: &[f64]) -> f64 {
    samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64
}

/// Peak target used when a signal must be rescaled to stay within `[-1, 1]`.
pub const PEAK_TARGET: f64 = 0.999;

/// Returns the gain that brings `samples` under full scale: `1.0` when the
/// peak is already `≤ 1`, otherwise `PEAK_TARGET / peak`.
pub(crate) fn peak_gain(samples: &[f64]) -> f64 {
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        PEAK_TARGET / peak
    } else {
        1.0
    }
}

/// Linear convolution truncated to the clip length, anchored at `t = 0`.
/// The result is peak-normalised only when it would exceed full scale.
pub fn convolve_ir(clip: &AudioClip, ir: &ImpulseResponse) -> Result<AudioClip> {
    convolve_ir_with_gain(clip, ir).map(|(c, _)| c)
}

/// As [`convolve_ir`], also returning the normalisation gain applied.
pub fn convolve_ir_with_gain(clip: &AudioClip, ir: &ImpulseResponse) -> Result<(AudioClip, f64)> {
    if clip.sample_rate_hz() != ir.sample_rate_hz() {
        return Err(Error::SampleRateMismatch {
            clip_hz: clip.sample_rate_hz(),
            ir_hz: ir.sample_rate_hz(),
        });
    }
    let x = clip.samples();
    let h = ir.samples();
    let n = x.len();
    let mut y = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate().take(n) {
        if hk == 0.0 {
            continue;
        }
        for (yi, xi) in y[k..].iter_mut().zip(x) {
            *yi += hk * xi;
        }
    }
    let gain = peak_gain(&y);
    if gain != 1.0 {
        y.iter_mut().for_each(|v| *v *= gain);
    }
    Ok((AudioClip::new(y, clip.sample_rate_hz())?, gain))
}

/// Loops (or truncates) `noise` to `len` samples starting at `offset`.
pub fn fit_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    let n = noise.len();
    (0..len).map(|i| noise[(offset + i) % n]).collect()
}

/// Gain applied to noise of power `p_noise` so that
/// `10·log10(p_ref / (gain² · p_noise)) = snr_db`.
pub fn snr_scale(p_ref: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_ref / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `10·log10(p_signal / p_noise)`.
pub fn snr_db(p_signal: f64, p_noise: f64) -> f64 {
    10.0 * (p_signal / p_noise).log10()
}

/// Adds `noise`, looped or truncated to the signal length, scaled so the
/// signal-to-noise ratio equals `snr_db`. Returns the mixture and the
/// applied noise gain. The mixture is not clipped.
pub fn mix_at_snr(signal: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<(AudioClip, f64)> {
    if signal.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::SampleRateMismatch {
            clip_hz: signal.sample_rate_hz(),
            ir_hz: noise.sample_rate_hz(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::Precondition("snr_db must be finite".into()));
    }
    let fitted = fit_noise(noise.samples(), signal.len(), 0);
    let p_signal = measure_power(signal);
    let p_noise = power_of(&fitted);
    if p_signal == 0.0 {
        return Err(Error::Silent("signal"));
    }
    if p_noise == 0.0 {
        return Err(Error::Silent("noise"));
    }
    let scale = snr_scale(p_signal, p_noise, snr_db);
    let mixed = signal
        .samples()
        .iter()
        .zip(&fitted)
        .map(|(s, n)| s + scale * n)
        .collect();
    Ok((AudioClip::new(mixed, signal.sample_rate_hz())?, scale))
}

/// Nearest-neighbour resampling; only used when explicitly enabled.
pub fn resample_nearest(clip: &AudioClip, target_hz: u32) -> Result<AudioClip> {
    if target_hz == clip.sample_rate_hz() {
        return Ok(clip.clone());
    }
    let ratio = clip.sample_rate_hz() as f64 / target_hz as f64;
    let out_len = ((clip.len() as f64) / ratio).round().max(1.0) as usize;
    let src = clip.samples();
    let samples = (0..out_len)
        .map(|i| src[((i as f64 * ratio).round() as usize).min(src.len() - 1)])
        .collect();
    AudioClip::new(samples, target_hz)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_clip(rng: &mut ChaCha8Rng, n: usize) -> AudioClip {
        AudioClip::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn power_of_zero_and_constant_clips() {
        let zero = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        assert_eq!(measure_power(&zero), 0.0);
        let half = AudioClip::new(vec![0.5; 37], 16_000).unwrap();
        assert_eq!(measure_power(&half), 0.25);
    }

    #[test]
    fn power_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clip = random_clip(&mut rng, 513);
        let mut oracle = 0.0;
        for s in clip.samples() {
            oracle += s * s;
        }
        oracle /= clip.len() as f64;
        assert!((measure_power(&clip) - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_clip_is_rejected() {
        assert!(matches!(AudioClip::new(vec![], 16_000), Err(Error::Precondition(_))));
        assert!(AudioClip::new(vec![f64::NAN], 16_000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn delta_ir_is_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = random_clip(&mut rng, 50);
        let same = convolve_ir(&clip, &ImpulseResponse::delta(0, 16_000).unwrap()).unwrap();
        assert_eq!(same, clip);
        let shifted = convolve_ir(&clip, &ImpulseResponse::delta(3, 16_000).unwrap()).unwrap();
        assert_eq!(&shifted.samples()[..3], &[0.0; 3]);
        assert_eq!(&shifted.samples()[3..], &clip.samples()[..47]);
    }

    #[test]
    fn convolution_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = random_clip(&mut rng, 64);
        let ir = ImpulseResponse::new((0..8).map(|_| rng.gen_range(-0.2..0.2)).collect(), 16_000)
            .unwrap();
        let got = convolve_ir(&clip, &ir).unwrap();
        for n in 0..64 {
            let mut acc = 0.0;
            for m in 0..8 {
                if n >= m {
                    acc += ir.samples()[m] * clip.samples()[n - m];
                }
            }
            assert!((got.samples()[n] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn loud_convolution_is_peak_normalised() {
        let clip = AudioClip::new(vec![0.9; 20], 16_000).unwrap();
        let ir = ImpulseResponse::new(vec![1.0, 1.0], 16_000).unwrap();
        let (out, gain) = convolve_ir_with_gain(&clip, &ir).unwrap();
        assert!((out.peak() - PEAK_TARGET).abs() < 1e-12);
        assert!((gain - PEAK_TARGET / 1.8).abs() < 1e-12);
    }

    #[test]
    fn sample_rate_mismatch_names_both_rates() {
        let clip = AudioClip::new(vec![0.1; 10], 16_000).unwrap();
        let ir = ImpulseResponse::new(vec![1.0], 8_000).unwrap();
        let msg = convolve_ir(&clip, &ir).unwrap_err().to_string();
        assert!(msg.contains("16000") && msg.contains("8000"), "{msg}");
    }

    #[test]
    fn mix_scale_closed_form_cases() {
        let sig = AudioClip::new(vec![1.0, -1.0, 1.0, -1.0], 16_000).unwrap();
        let (_, scale) = mix_at_snr(&sig, &sig, 0.0).unwrap();
        assert!((scale - 1.0).abs() < 1e-15);

        // P_signal = 1.0, P_noise = 0.25, 10 dB
        let noise = AudioClip::new(vec![0.5, -0.5, 0.5, -0.5], 16_000).unwrap();
        let (mixed, scale) = mix_at_snr(&sig, &noise, 10.0).unwrap();
        assert!((scale - 0.4f64.sqrt()).abs() < 1e-12);
        assert!((scale - 0.632_456).abs() < 1e-6);
        let residual: Vec<f64> =
            mixed.samples().iter().zip(sig.samples()).map(|(m, s)| m - s).collect();
        let measured = snr_db(1.0, power_of(&residual));
        assert!((measured - 10.0).abs() < 1e-9);
    }

    #[test]
    fn silent_inputs_are_rejected() {
        let sig = AudioClip::new(vec![0.3; 8], 16_000).unwrap();
        let silent = AudioClip::new(vec![0.0; 8], 16_000).unwrap();
        assert!(matches!(mix_at_snr(&sig, &silent, 5.0), Err(Error::Silent("noise"))));
        assert!(matches!(mix_at_snr(&silent, &sig, 5.0), Err(Error::Silent("signal"))));
    }

    #[test]
    fn short_noise_is_looped() {
        assert_eq!(fit_noise(&[1.0, 2.0, 3.0], 7, 1), vec![2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0]);
        assert_eq!(fit_noise(&[1.0, 2.0, 3.0], 2, 0), vec![1.0, 2.0]);
    }

    #[test]
    fn nearest_resampling_halves_length() {
        let clip = AudioClip::new((0..100).map(|i| i as f64 / 100.0).collect(), 32_000).unwrap();
        let out = resample_nearest(&clip, 16_000).unwrap();
        assert_eq!(out.len(), 50);
        assert_eq!(out.samples()[10], clip.samples()[20]);
    }

    proptest::proptest! {
        #[test]
        fn measured_snr_matches_request(seed in 0u64..10_000, snr in 0.0f64..40.0, len in 16usize..400, nlen in 4usize..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sig = random_clip(&mut rng, len);
            let noise = random_clip(&mut rng, nlen);
            let (mixed, _) = mix_at_snr(&sig, &noise, snr).unwrap();
            let residual: Vec<f64> = mixed.samples().iter().zip(sig.samples()).map(|(m, s)| m - s).collect();
            let measured = snr_db(measure_power(&sig), power_of(&residual));
            proptest::prop_assert!((measured - snr).abs() < 0.01);
            proptest::prop_assert_eq!(mixed.len(), sig.len());
        }
    }
}
