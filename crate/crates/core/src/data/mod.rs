//! Episode records, the channel schema, region profiles, the synthetic
//! cohort generator, episode files and cohort analysis.

pub mod analysis;
pub mod episode_io;
pub mod generate;
pub mod profile;
pub mod schema;

use serde::{Deserialize, Serialize};

pub use schema::{ChannelKind, ChannelSchema, NUM_CHANNELS};

/// Number of phenotype labels.
pub const NUM_PHENOTYPES: usize = 25;

/// Short phenotype names in label-vector order.
pub const PHENOTYPES: [&str; NUM_PHENOTYPES] = [
    "AURF", "ACD", "AMI", "CD", "CKD", "COPD", "CS", "CoDi", "CHF", "CA", "DMC", "DM", "LD", "EH",
    "FD", "GH", "HWC", "OLD", "LR", "UR", "Pleurisy", "Pneumonia", "RF", "Septicemia", "Shock",
];

/// Region tag of episodes whose hospital has no region label.
pub const UNKNOWN_REGION: &str = "unknown";

/// One timestamped measurement, `time` in hours since ICU admission.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub channel: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// In-hospital mortality.
    pub mortality: bool,
    pub phenotypes: Vec<bool>,
    /// Time of death inside the ICU stay, if the patient died in the unit.
    pub death_time: Option<f64>,
}

impl Labels {
    /// A unit death must also be a hospital death.
    pub fn consistent(&self) -> bool {
        self.death_time.is_none() || self.mortality
    }
}

/// One ICU stay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub patient_id: u64,
    pub episode: u32,
    pub region: String,
    pub age: f64,
    pub los_hours: f64,
    /// Sorted by time, then channel.
    pub events: Vec<Event>,
    pub labels: Labels,
}

impl EpisodeRecord {
    /// File name of this episode in the on-disk layout.
    pub fn stay_name(&self) -> String {
        format!("{}_episode{}_timeseries.csv", self.patient_id, self.episode)
    }

    pub fn record_count(&self) -> usize {
        self.events.len()
    }

    pub fn sort_events(&mut self) {
        self.events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.channel.cmp(&b.channel)));
    }
}
