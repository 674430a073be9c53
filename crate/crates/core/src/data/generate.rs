//! Synthetic cohort generator.
//!
//! Each episode draws one standardized latent deviate `u_c ~ N(0, 1)` per
//! channel. Every recording of channel `c` is
//! `dist_c.value_at(0.8 u_c + 0.6 ε)` with fresh `ε ~ N(0, 1)`, so the
//! per-episode channel mean carries `u_c`. Labels are driven by the
//! latent score `s = w · u`:
//!
//! - mortality ~ Bernoulli(sigmoid(a + s_mort)),
//! - phenotype k ~ Bernoulli(sigmoid(a_k + s_k)),
//!
//! with intercepts solved so the marginal prevalence equals the profile's.
//! The weight vectors of a region are `(1 − shift)·w_ref + shift·w_alt`;
//! `shift` is the single knob controlling concept shift between regions.
//!
//! Stay length is `1 + Exp(rlos_mean_hours)`, which makes the remaining
//! stay at any hour past the first exponential with the profile's mean.
//! Dying patients die inside the unit (at the end of the stay) with a
//! probability chosen to reproduce the profile's decompensation rate; their
//! vitals drift over the last 24 hours. Recording counts are
//! Poisson(frequency × LOS) with uniform timestamps; the first height and
//! weight recording of a stay sits at timestamp zero.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};

use super::profile::{ProfileError, RegionProfile};
use super::schema::{self, NUM_CHANNELS};
use super::{EpisodeRecord, Event, Labels, NUM_PHENOTYPES, UNKNOWN_REGION};
use crate::par::Executor;
use crate::seed;
use crate::tensor::sigmoid;

const BETWEEN: f64 = 0.8;
const WITHIN: f64 = 0.6;
/// Offset added to the exponential stay length, in hours.
pub const LOS_OFFSET_HOURS: f64 = 1.0;
/// Drift of the terminal vitals, in scale units at the moment of death.
const TERMINAL_DRIFT: f64 = 1.5;

/// Reference mortality weights over channels (schema order).
pub const MORTALITY_WEIGHTS_REF: [f64; NUM_CHANNELS] = [
    0.0, -0.3, 0.0, 0.0, 0.0, -0.7, 0.0, 0.0, 0.9, 0.0, -0.6, -0.5, 0.6, 0.0, 0.3, 0.0, 0.0,
];
/// Alternate mortality weights that shifted regions move toward.
pub const MORTALITY_WEIGHTS_ALT: [f64; NUM_CHANNELS] = [
    0.0, 0.3, 0.0, 0.0, 0.0, -0.2, 0.0, 0.7, -0.8, 0.0, 0.6, -0.3, -0.5, 0.5, -0.4, 0.0, 0.0,
];

/// Channels recorded often enough to carry label signal.
const DENSE_CHANNELS: [usize; 9] = [
    schema::DIASTOLIC_BP,
    schema::GLUCOSE,
    schema::HEART_RATE,
    schema::MEAN_BP,
    schema::OXYGEN_SATURATION,
    schema::RESPIRATORY_RATE,
    schema::SYSTOLIC_BP,
    schema::TEMPERATURE,
    schema::GCS_TOTAL,
];

/// Direction of the terminal drift per channel.
const TERMINAL_SIGNS: [(usize, f64); 5] = [
    (schema::HEART_RATE, 1.0),
    (schema::MEAN_BP, -1.0),
    (schema::RESPIRATORY_RATE, 1.0),
    (schema::OXYGEN_SATURATION, -1.0),
    (schema::SYSTOLIC_BP, -1.0),
];

/// Reference weights of phenotype `k`: two dense channels with opposite
/// signs, chosen by a fixed stride.
pub fn phenotype_weights_ref(k: usize) -> [f64; NUM_CHANNELS] {
    let mut w = [0.0; NUM_CHANNELS];
    w[DENSE_CHANNELS[k % DENSE_CHANNELS.len()]] += 0.9;
    w[DENSE_CHANNELS[(k * 4 + 3) % DENSE_CHANNELS.len()]] -= 0.6;
    w
}

pub fn phenotype_weights_alt(k: usize) -> [f64; NUM_CHANNELS] {
    let mut w = [0.0; NUM_CHANNELS];
    w[DENSE_CHANNELS[(k + 5) % DENSE_CHANNELS.len()]] += 0.9;
    w[DENSE_CHANNELS[(k * 2 + 1) % DENSE_CHANNELS.len()]] -= 0.6;
    w
}

fn mix(a: &[f64; NUM_CHANNELS], b: &[f64; NUM_CHANNELS], shift: f64) -> [f64; NUM_CHANNELS] {
    std::array::from_fn(|c| (1.0 - shift) * a[c] + shift * b[c])
}

fn norm(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(w: &[f64], u: &[f64]) -> f64 {
    w.iter().zip(u).map(|(a, b)| a * b).sum()
}

/// `E[sigmoid(a + σZ)]` for standard normal `Z`, by the trapezoid rule on
/// `[-10, 10]`.
pub fn mean_sigmoid(intercept: f64, sigma: f64) -> f64 {
    const POINTS: usize = 4001;
    let h = 20.0 / (POINTS - 1) as f64;
    let norm_const = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for i in 0..POINTS {
        let z = -10.0 + h * i as f64;
        let weight = if i == 0 || i == POINTS - 1 { 0.5 } else { 1.0 };
        total += weight * norm_const * (-0.5 * z * z).exp() * sigmoid(intercept + sigma * z);
    }
    total * h
}

/// Intercept `a` with `E[sigmoid(a + σZ)] = prevalence`.
pub fn calibrate_intercept(prevalence: f64, sigma: f64) -> f64 {
    if prevalence <= 0.0 {
        return -1e3;
    }
    if prevalence >= 1.0 {
        return 1e3;
    }
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_sigmoid(mid, sigma) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Expected per-episode (positive, total) decompensation label counts over
/// decompensation-eligible stays (LOS ≥ 5 h) for a patient who dies in the
/// unit at the end of the stay.
pub fn decomp_label_expectations(rlos_mean_hours: f64) -> (f64, f64) {
    // ⌊LOS⌋ = n with probability e^{-(n-1)/M}(1 - e^{-1/M}); for n ≥ 5 the
    // stay has n - 4 labelled hours, min(24, n - 4) of them positive.
    let m = rlos_mean_hours;
    let cell = 1.0 - (-1.0 / m).exp();
    let tail = (-(5.0 - LOS_OFFSET_HOURS) / m).exp();
    let (mut positives, mut total) = (0.0, 0.0);
    let mut n = 5u64;
    loop {
        let p = (-((n as f64) - LOS_OFFSET_HOURS) / m).exp() * cell / tail;
        if p < 1e-18 && n > 100 {
            break;
        }
        let hours = (n - 4) as f64;
        positives += p * hours.min(24.0);
        total += p * hours;
        n += 1;
    }
    (positives, total)
}

/// Label-generating parameters derived from a profile.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelModel {
    pub mortality_weights: [f64; NUM_CHANNELS],
    pub mortality_intercept: f64,
    pub phenotype_weights: Vec<[f64; NUM_CHANNELS]>,
    pub phenotype_intercepts: Vec<f64>,
    /// Probability that a patient with in-hospital mortality dies in the unit.
    pub unit_death_given_mortality: f64,
}

impl LabelModel {
    pub fn for_profile(profile: &RegionProfile) -> Self {
        let mortality_weights = mix(&MORTALITY_WEIGHTS_REF, &MORTALITY_WEIGHTS_ALT, profile.shift);
        let mortality_intercept = calibrate_intercept(profile.ihm_prevalence, norm(&mortality_weights));
        let phenotype_weights: Vec<_> = (0..NUM_PHENOTYPES)
            .map(|k| mix(&phenotype_weights_ref(k), &phenotype_weights_alt(k), profile.shift))
            .collect();
        let phenotype_intercepts = phenotype_weights
            .iter()
            .zip(profile.phenotype_prevalence)
            .map(|(w, p)| calibrate_intercept(p, norm(w)))
            .collect();
        let (positives, total) = decomp_label_expectations(profile.rlos_mean_hours);
        let unit_death_rate = (profile.decomp_rate * total / positives).min(profile.ihm_prevalence);
        let unit_death_given_mortality = if profile.ihm_prevalence > 0.0 {
            unit_death_rate / profile.ihm_prevalence
        } else {
            0.0
        };
        LabelModel {
            mortality_weights,
            mortality_intercept,
            phenotype_weights,
            phenotype_intercepts,
            unit_death_given_mortality,
        }
    }
}

/// Patient id and episode number of episode `index`. Consecutive pairs
/// `(2k, 2k+1)` share a patient with probability `multi_stay_rate`.
fn patient_of(profile: &RegionProfile, seed_value: u64, index: usize) -> (u64, u32) {
    let base = 100_000_000 * (1 + seed::derive(0, &[name_hash(&profile.name)]) % 90);
    let pair = index / 2;
    let mut rng = seed::rng(seed_value, &[seed::stream::EPISODE, u64::MAX, pair as u64]);
    if rng.random::<f64>() < profile.multi_stay_rate {
        (base + 2 * pair as u64, (index % 2) as u32 + 1)
    } else {
        (base + index as u64, 1)
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Episode `index` of the cohort for (`profile`, `seed`). Independent of
/// every other episode.
pub fn generate_episode(profile: &RegionProfile, model: &LabelModel, seed_value: u64, index: usize) -> EpisodeRecord {
    let mut rng = seed::rng(seed_value, &[seed::stream::EPISODE, index as u64]);
    let latent: [f64; NUM_CHANNELS] = std::array::from_fn(|_| rng.sample(StandardNormal));

    let age = if rng.random::<f64>() < profile.pediatric_rate {
        rng.random_range(1.0..18.0)
    } else {
        rng.random_range(18.0..90.0)
    };
    let stay = Exp::new(1.0 / profile.rlos_mean_hours).expect("positive mean").sample(&mut rng);
    let los = LOS_OFFSET_HOURS + stay;

    let mortality = rng.random::<f64>() < sigmoid(model.mortality_intercept + dot(&model.mortality_weights, &latent));
    let mut death_time = None;
    if mortality && rng.random::<f64>() < model.unit_death_given_mortality {
        death_time = Some(los);
    }
    let phenotypes: Vec<bool> = model
        .phenotype_weights
        .iter()
        .zip(&model.phenotype_intercepts)
        .map(|(w, a)| rng.random::<f64>() < sigmoid(a + dot(w, &latent)))
        .collect();
    let mut labels = Labels {
        mortality,
        phenotypes,
        death_time,
    };
    if rng.random::<f64>() < profile.inconsistent_label_rate {
        labels.mortality = false;
        labels.death_time = Some(los);
    }
    let region = if rng.random::<f64>() < profile.unknown_region_rate {
        UNKNOWN_REGION.to_string()
    } else {
        profile.name.clone()
    };

    let mut events = Vec::new();
    for c in 0..NUM_CHANNELS {
        let rate = profile.frequencies[c] * los;
        let count = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        let dist = &profile.distributions[c];
        let categorical = matches!(
            c,
            schema::CAPILLARY_REFILL | schema::GCS_EYE | schema::GCS_MOTOR | schema::GCS_TOTAL | schema::GCS_VERBAL
        );
        let drift_sign = TERMINAL_SIGNS.iter().find(|(ch, _)| *ch == c).map(|(_, s)| *s);
        for i in 0..count {
            let time = if i == 0 && (c == schema::HEIGHT || c == schema::WEIGHT) {
                0.0
            } else {
                rng.random_range(0.0..los)
            };
            let noise: f64 = rng.sample(StandardNormal);
            let mut deviate = BETWEEN * latent[c] + WITHIN * noise;
            if let (Some(death), Some(sign)) = (labels.death_time, drift_sign) {
                let to_death = death - time;
                if to_death < 24.0 {
                    deviate += sign * TERMINAL_DRIFT * (1.0 - to_death / 24.0);
                }
            }
            let mut value = dist.value_at(deviate);
            if categorical {
                value = value.round().clamp(dist.lower, dist.upper);
            }
            events.push(Event { time, channel: c, value });
        }
    }

    let (patient_id, episode) = patient_of(profile, seed_value, index);
    let mut record = EpisodeRecord {
        patient_id,
        episode,
        region,
        age,
        los_hours: los,
        events,
        labels,
    };
    record.sort_events();
    record
}

/// Episodes `range` of the cohort; identical to the same slice of
/// [`generate_cohort`].
pub fn generate_range(
    profile: &RegionProfile,
    seed_value: u64,
    range: Range<usize>,
    exec: Executor,
) -> Result<Vec<EpisodeRecord>, ProfileError> {
    profile.validate()?;
    let model = LabelModel::for_profile(profile);
    Ok(exec.map_range(range, |i| generate_episode(profile, &model, seed_value, i)))
}

pub fn generate_cohort(profile: &RegionProfile, seed_value: u64) -> Result<Vec<EpisodeRecord>, ProfileError> {
    generate_range(profile, seed_value, 0..profile.cohort_size, Executor::available())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_target_prevalence() {
        for &(p, s) in &[(0.1149, 1.8), (0.002, 1.0), (0.5, 0.0), (0.42, 2.5)] {
            let a = calibrate_intercept(p, s);
            assert!((mean_sigmoid(a, s) - p).abs() < 1e-9, "p={p} s={s}");
        }
    }

    #[test]
    fn decomp_expectations_match_brute_force_sum() {
        // Independent oracle: integrate over LOS on a fine grid.
        let m = 106.247;
        let (pos, tot) = decomp_label_expectations(m);
        let (mut bp, mut bt, mut mass) = (0.0, 0.0, 0.0);
        let h = 0.001;
        let mut x = 5.0 - LOS_OFFSET_HOURS + h / 2.0;
        while x < 60.0 * m {
            let los = LOS_OFFSET_HOURS + x;
            let density = (-x / m).exp() / m * h;
            let n = los.floor();
            bp += density * (n - 4.0).min(24.0);
            bt += density * (n - 4.0);
            mass += density;
            x += h;
        }
        assert!((pos - bp / mass).abs() < 1e-3, "{pos} vs {}", bp / mass);
        assert!((tot - bt / mass).abs() < 1e-2, "{tot} vs {}", bt / mass);
    }

    #[test]
    fn episodes_respect_invariants() {
        let profile = RegionProfile::named("south").unwrap();
        let cohort = generate_range(&profile, 5, 0..200, Executor::Sequential).unwrap();
        for e in &cohort {
            assert!(e.los_hours > 0.0);
            assert!(e.labels.consistent());
            assert_eq!(e.labels.phenotypes.len(), NUM_PHENOTYPES);
            assert!(e.events.iter().all(|ev| ev.time >= 0.0 && ev.time < e.los_hours));
            assert!(e.events.windows(2).all(|w| w[0].time <= w[1].time));
        }
    }

    #[test]
    fn zero_frequency_gives_no_recordings() {
        let profile = RegionProfile::named("midwest").unwrap();
        let cohort = generate_range(&profile, 1, 0..300, Executor::Sequential).unwrap();
        let count = cohort
            .iter()
            .flat_map(|e| &e.events)
            .filter(|ev| ev.channel == schema::CAPILLARY_REFILL)
            .count();
        assert_eq!(count, 0);
    }

    #[test]
    fn ranges_and_executors_agree() {
        let profile = RegionProfile::named("west").unwrap();
        let whole = generate_range(&profile, 9, 0..40, Executor::Parallel).unwrap();
        let tail = generate_range(&profile, 9, 25..40, Executor::Sequential).unwrap();
        assert_eq!(&whole[25..], &tail[..]);
    }

    #[test]
    fn poisson_mean_of_recordings() {
        let mut profile = RegionProfile::named("south").unwrap();
        profile.frequencies = [0.0; NUM_CHANNELS];
        profile.frequencies[schema::HEART_RATE] = 2.0;
        let model = LabelModel::for_profile(&profile);
        // Per-episode count / LOS estimates the frequency; at 10k stays
        // the mean rate over a 5 h window is 10 events ± 0.2.
        let n = 10_000;
        let mut total = 0.0;
        for i in 0..n {
            let e = generate_episode(&profile, &model, 3, i);
            let in_window = e.events.iter().filter(|ev| ev.time < 5.0).count();
            let window = e.los_hours.min(5.0);
            total += in_window as f64 * 5.0 / window;
        }
        let mean = total / n as f64;
        assert!((mean - 10.0).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn mortality_prevalence_at_10k() {
        let profile = RegionProfile::named("south").unwrap();
        let cohort = generate_range(&profile, 17, 0..10_000, Executor::available()).unwrap();
        let rate = cohort.iter().filter(|e| e.labels.mortality).count() as f64 / 1e4;
        assert!((rate - 0.1149).abs() < 0.01, "rate {rate}");
    }
}
