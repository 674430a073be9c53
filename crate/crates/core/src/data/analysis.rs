//! Cohort statistics: per-channel recording frequency and distributions of
//! per-episode channel means.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::schema::SHORT_NAMES;
use super::{EpisodeRecord, NUM_CHANNELS};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("episode {0} has non-positive length of stay")]
    NonPositiveStay(String),
}

/// Streaming form of [`measurement_frequency`]: `F = (1/n) Σ c_i / t_i`.
#[derive(Clone, Debug, Default)]
pub struct FrequencyAccumulator {
    sums: [f64; NUM_CHANNELS],
    episodes: usize,
}

impl FrequencyAccumulator {
    pub fn add(&mut self, episode: &EpisodeRecord) -> Result<(), AnalysisError> {
        if episode.los_hours <= 0.0 {
            return Err(AnalysisError::NonPositiveStay(episode.stay_name()));
        }
        let mut counts = [0usize; NUM_CHANNELS];
        for ev in &episode.events {
            counts[ev.channel] += 1;
        }
        for (s, c) in self.sums.iter_mut().zip(counts) {
            *s += c as f64 / episode.los_hours;
        }
        self.episodes += 1;
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn finish(&self) -> Result<[f64; NUM_CHANNELS], AnalysisError> {
        if self.episodes == 0 {
            return Err(AnalysisError::EmptyCohort);
        }
        Ok(self.sums.map(|s| s / self.episodes as f64))
    }
}

/// Average recordings per stay-hour for each channel.
pub fn measurement_frequency(cohort: &[EpisodeRecord]) -> Result<[f64; NUM_CHANNELS], AnalysisError> {
    let mut acc = FrequencyAccumulator::default();
    for ep in cohort {
        acc.add(ep)?;
    }
    acc.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel: String,
    /// No episode recorded this channel.
    pub absent: bool,
    /// Episodes with at least one recording.
    pub episodes: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// `bins + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histogram, mean and quartiles of per-episode channel means.
pub fn distribution_summary(cohort: &[EpisodeRecord], bins: usize) -> Result<Vec<ChannelSummary>, AnalysisError> {
    if cohort.is_empty() {
        return Err(AnalysisError::EmptyCohort);
    }
    let bins = bins.max(1);
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); NUM_CHANNELS];
    for ep in cohort {
        let mut sum = [0.0; NUM_CHANNELS];
        let mut count = [0usize; NUM_CHANNELS];
        for ev in &ep.events {
            sum[ev.channel] += ev.value;
            count[ev.channel] += 1;
        }
        for c in 0..NUM_CHANNELS {
            if count[c] > 0 {
                per_channel[c].push(sum[c] / count[c] as f64);
            }
        }
    }
    Ok(per_channel
        .into_iter()
        .enumerate()
        .map(|(c, mut values)| {
            let channel = SHORT_NAMES[c].to_string();
            if values.is_empty() {
                return ChannelSummary {
                    channel,
                    absent: true,
                    episodes: 0,
                    mean: f64::NAN,
                    q1: f64::NAN,
                    median: f64::NAN,
                    q3: f64::NAN,
                    edges: Vec::new(),
                    counts: Vec::new(),
                };
            }
            values.sort_by(f64::total_cmp);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let (lo, hi) = (values[0], values[values.len() - 1]);
            let width = (hi - lo) / bins as f64;
            let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
            let mut counts = vec![0usize; bins];
            for &v in &values {
                let idx = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
                counts[idx] += 1;
            }
            ChannelSummary {
                channel,
                absent: false,
                episodes: values.len(),
                mean,
                q1: quantile(&values, 0.25),
                median: quantile(&values, 0.5),
                q3: quantile(&values, 0.75),
                edges,
                counts,
            }
        })
        .collect())
}
