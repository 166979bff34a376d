use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    convolve_ir_with_gain, fit_noise, measure_power, peak_gain, power_of, snr_db, snr_scale,
    AudioClip, ImpulseResponse,
};
use crate::error::{Error, Result};

pub const MIN_BACKGROUND_SNR_DB: f64 = 0.0;
pub const MAX_BACKGROUND_SNR_DB: f64 = 40.0;

/// Everything needed to reproduce one corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub snr_db_background: f64,
    pub snr_db_interferer: f64,
    pub ir_id: Option<String>,
    pub interferer_id: Option<String>,
    pub noise_id: Option<String>,
    pub seed: u64,
}

impl CorruptionSpec {
    /// No reverberation, no interferer, no noise.
    pub fn clean(seed: u64) -> Self {
        Self {
            snr_db_background: MAX_BACKGROUND_SNR_DB,
            snr_db_interferer: MAX_BACKGROUND_SNR_DB,
            ir_id: None,
            interferer_id: None,
            noise_id: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BACKGROUND_SNR_DB..=MAX_BACKGROUND_SNR_DB).contains(&self.snr_db_background) {
            return Err(Error::Precondition(format!(
                "background SNR {} dB outside [{MIN_BACKGROUND_SNR_DB}, {MAX_BACKGROUND_SNR_DB}]",
                self.snr_db_background
            )));
        }
        if !self.snr_db_interferer.is_finite() {
            return Err(Error::Precondition("interferer SNR must be finite".into()));
        }
        Ok(())
    }
}

/// What was actually applied to one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: CorruptionSpec,
    pub clean_power: f64,
    pub ir_gain: f64,
    pub interferer_offset: usize,
    pub interferer_scale: f64,
    pub noise_offset: usize,
    pub noise_scale: f64,
    /// Background SNR re-measured from the scaled noise against the clean signal.
    pub measured_snr_db: Option<f64>,
    /// Whole-mixture rescale applied to stay under full scale.
    pub output_gain: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub irs: BTreeMap<String, ImpulseResponse>,
    pub interferers: BTreeMap<String, AudioClip>,
    pub noises: BTreeMap<String, AudioClip>,
}

fn lookup<'a, T>(pool: &'a BTreeMap<String, T>, kind: &'static str, id: &str) -> Result<&'a T> {
    pool.get(id).ok_or_else(|| Error::MissingPoolEntry {
        pool: kind,
        id: id.to_string(),
    })
}

/// Reverb, then interfering speech, then background noise. Both SNRs are
/// taken against the clean (pre-reverb) signal power.
pub fn simulate_noisy(
    clip: &AudioClip,
    spec: &CorruptionSpec,
    pools: &Pools,
) -> Result<(AudioClip, Provenance)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Both offsets are always drawn so the stream does not depend on which
    // corruptions are enabled.
    let interferer_u: f64 = rng.gen();
    let noise_u: f64 = rng.gen();

    let clean_power = measure_power(clip);
    let mut prov = Provenance {
        spec: spec.clone(),
        clean_power,
        ir_gain: 1.0,
        interferer_offset: 0,
        interferer_scale: 0.0,
        noise_offset: 0,
        noise_scale: 0.0,
        measured_snr_db: None,
        output_gain: 1.0,
    };

    let mut x = match &spec.ir_id {
        Some(id) => {
            let ir = lookup(&pools.irs, "impulse response", id)?;
            let (rev, gain) = convolve_ir_with_gain(clip, ir)?;
            prov.ir_gain = gain;
            rev.into_samples()
        }
        None => clip.samples().to_vec(),
    };

    let mut add = |pool: &BTreeMap<String, AudioClip>,
                   kind: &'static str,
                   id: &str,
                   u: f64,
                   snr: f64|
     -> Result<(usize, f64, f64)> {
        let src = lookup(pool, kind, id)?;
        if src.sample_rate_hz() != clip.sample_rate_hz() {
            return Err(Error::SampleRateMismatch {
                clip_hz: clip.sample_rate_hz(),
                ir_hz: src.sample_rate_hz(),
            });
        }
        if clean_power == 0.0 {
            return Err(Error::Silent("signal"));
        }
        let offset = ((u * src.len() as f64) as usize).min(src.len() - 1);
        let fitted = fit_noise(src.samples(), x.len(), offset);
        let p = power_of(&fitted);
        if p == 0.0 {
            return Err(Error::Silent(kind));
        }
        let scale = snr_scale(clean_power, p, snr);
        for (xi, ni) in x.iter_mut().zip(&fitted) {
            *xi += scale * ni;
        }
        Ok((offset, scale, snr_db(clean_power, scale * scale * p)))
    };

    if let Some(id) = &spec.interferer_id {
        let (offset, scale, _) = add(
            &pools.interferers,
            "interferer",
            id,
            interferer_u,
            spec.snr_db_interferer,
        )?;
        prov.interferer_offset = offset;
        prov.interferer_scale = scale;
    }
    if let Some(id) = &spec.noise_id {
        let (offset, scale, measured) =
            add(&pools.noises, "noise", id, noise_u, spec.snr_db_background)?;
        prov.noise_offset = offset;
        prov.noise_scale = scale;
        prov.measured_snr_db = Some(measured);
    }

    let gain = peak_gain(&x);
    if gain != 1.0 {
        x.iter_mut().for_each(|v| *v *= gain);
    }
    prov.output_gain = gain;
    Ok((AudioClip::new(x, clip.sample_rate_hz())?, prov))
}

/// Exponentially decaying white noise with a unit direct path, reaching
/// −60 dB after `rt60_secs`.
pub fn synthetic_ir(rt60_secs: f64, sample_rate_hz: u32, seed: u64) -> Result<ImpulseResponse> {
    if !(rt60_secs > 0.0) {
        return Err(Error::Precondition("rt60 must be positive".into()));
    }
    let len = ((rt60_secs * sample_rate_hz as f64).ceil() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = 1000f64.ln() / (rt60_secs * sample_rate_hz as f64);
    let mut samples: Vec<f64> = (0..len)
        .map(|n| rng.gen_range(-1.0..1.0) * (-decay * n as f64).exp() * 0.3)
        .collect();
    samples[0] = 1.0;
    ImpulseResponse::new(samples, sample_rate_hz)
}

/// Sampling ranges for [`sample_corruption`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionRanges {
    pub snr_db_background: (f64, f64),
    pub snr_db_interferer: (f64, f64),
    pub p_reverb: f64,
    pub p_interferer: f64,
}

impl Default for CorruptionRanges {
    fn default() -> Self {
        Self {
            snr_db_background: (MIN_BACKGROUND_SNR_DB, MAX_BACKGROUND_SNR_DB),
            snr_db_interferer: (MIN_BACKGROUND_SNR_DB, MAX_BACKGROUND_SNR_DB),
            p_reverb: 0.5,
            p_interferer: 0.5,
        }
    }
}

/// Draws a corruption for one utterance. Pool ids are taken in sorted order
/// so the draw depends only on `seed` and the pool contents.
pub fn sample_corruption(seed: u64, ranges: &CorruptionRanges, pools: &Pools) -> CorruptionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let pick = |ids: Vec<&String>, p: f64, rng: &mut ChaCha8Rng| -> Option<String> {
        let on: f64 = rng.gen();
        let which: f64 = rng.gen();
        if ids.is_empty() || on >= p {
            return None;
        }
        Some(ids[((which * ids.len() as f64) as usize).min(ids.len() - 1)].clone())
    };
    let ir_id = pick(pools.irs.keys().collect(), ranges.p_reverb, &mut rng);
    let interferer_id = pick(pools.interferers.keys().collect(), ranges.p_interferer, &mut rng);
    let noise_id = pick(pools.noises.keys().collect(), 1.0, &mut rng);
    let (lo, hi) = ranges.snr_db_background;
    let snr_db_background = lo + (hi - lo) * rng.gen::<f64>();
    let (lo, hi) = ranges.snr_db_interferer;
    let snr_db_interferer = lo + (hi - lo) * rng.gen::<f64>();
    CorruptionSpec {
        snr_db_background,
        snr_db_interferer,
        ir_id,
        interferer_id,
        noise_id,
        seed,
    }
}
