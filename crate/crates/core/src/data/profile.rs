//! Region profiles: the parameters the synthetic generator draws a cohort
//! from.
//!
//! The shipped defaults carry per-region measurement frequencies, phenotype
//! and mortality prevalences, decompensation rates and mean remaining stay
//! for MIMIC-III and the four eICU regions. Value distributions are
//! synthetic choices (Gaussian per channel, with FiO2 and pH shaped
//! differently in the eICU regions than in MIMIC-III).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{self, CHANNEL_NAMES, NUM_CHANNELS};
use super::{NUM_PHENOTYPES, PHENOTYPES};
use crate::kv::{KvError, KvFile};

/// Default concept-shift coefficient of the eICU regions.
pub const DEFAULT_SHIFT: f64 = 0.6;

/// Default number of episodes generated per region.
pub const DEFAULT_COHORT_SIZE: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    /// `center` is the median and `scale` the log-space standard deviation.
    LogNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueDist {
    pub family: Family,
    pub center: f64,
    pub scale: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ValueDist {
    pub const fn gaussian(center: f64, scale: f64, lower: f64, upper: f64) -> Self {
        ValueDist {
            family: Family::Gaussian,
            center,
            scale,
            lower,
            upper,
        }
    }

    /// Maps a standardized deviate to a value in `[lower, upper]`.
    pub fn value_at(&self, deviate: f64) -> f64 {
        let v = match self.family {
            Family::Gaussian => self.center + self.scale * deviate,
            Family::LogNormal => (self.center.ln() + self.scale * deviate).exp(),
        };
        v.clamp(self.lower, self.upper)
    }

    fn render(&self) -> String {
        let family = match self.family {
            Family::Gaussian => "gaussian",
            Family::LogNormal => "lognormal",
        };
        format!("{family} {} {} {} {}", self.center, self.scale, self.lower, self.upper)
    }

    fn parse(text: &str) -> Option<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != 5 {
            return None;
        }
        let family = match parts[0] {
            "gaussian" => Family::Gaussian,
            "lognormal" => Family::LogNormal,
            _ => return None,
        };
        let nums: Vec<f64> = parts[1..].iter().map(|p| p.parse().ok()).collect::<Option<_>>()?;
        Some(ValueDist {
            family,
            center: nums[0],
            scale: nums[1],
            lower: nums[2],
            upper: nums[3],
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("invalid profile {profile}: {reason}")]
    InvalidProfile { profile: String, reason: String },
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub name: String,
    pub cohort_size: usize,
    /// Expected recordings per stay-hour, by channel.
    pub frequencies: [f64; NUM_CHANNELS],
    pub distributions: [ValueDist; NUM_CHANNELS],
    pub phenotype_prevalence: [f64; NUM_PHENOTYPES],
    pub ihm_prevalence: f64,
    /// Fraction of per-hour decompensation labels that are positive.
    pub decomp_rate: f64,
    /// Mean remaining length of stay, in hours.
    pub rlos_mean_hours: f64,
    /// Concept-shift coefficient in `[0, 1]`: how far the label weights move
    /// from the reference pattern toward the alternate pattern.
    pub shift: f64,
    /// Covariate shift of channel centers, in tenths of a scale unit.
    pub center_offset: f64,
    pub pediatric_rate: f64,
    pub unknown_region_rate: f64,
    pub inconsistent_label_rate: f64,
    /// Probability that two consecutive episodes belong to one patient.
    pub multi_stay_rate: f64,
}

/// Named regions with shipped defaults.
pub const REGIONS: [&str; 5] = ["MIMIC-III", "South", "Midwest", "West", "Northeast"];

// Recordings per stay-hour, schema channel order.
const FREQUENCIES: [[f64; NUM_CHANNELS]; 5] = [
    // MIMIC-III
    [
        0.0025, 1.0641, 0.0597, 0.1143, 0.1238, 0.1615, 0.1242, 0.2462, 1.1532, 0.0049, 1.0563,
        1.1260, 1.1519, 1.0646, 0.3198, 0.0427, 0.0977,
    ],
    // South
    [
        0.0237, 0.9663, 0.0227, 0.2287, 0.2286, 0.2253, 0.2359, 0.1819, 1.1086, 0.0266, 0.9931,
        0.9953, 1.0612, 0.0966, 0.3092, 0.0269, 0.0219,
    ],
    // Midwest
    [
        0.0, 1.1045, 0.0207, 0.1091, 0.1088, 0.1085, 0.1750, 0.2061, 1.2787, 0.0267, 1.0795,
        1.1963, 1.1638, 1.1044, 0.3366, 0.0255, 0.0233,
    ],
    // West
    [
        0.0110, 1.4268, 0.0219, 0.1051, 0.1050, 0.1050, 0.1562, 0.1824, 1.5929, 0.0319, 1.3693,
        0.8140, 1.2426, 1.4268, 0.4444, 0.0323, 0.0180,
    ],
    // Northeast
    [
        0.1200, 1.0844, 0.0144, 0.5027, 0.5026, 0.5027, 0.5027, 0.2540, 1.0707, 0.0263, 1.0376,
        0.7383, 1.0300, 1.0845, 0.3391, 0.0263, 0.0228,
    ],
];

// Phenotype prevalence, PHENOTYPES order.
const PHENOTYPE_PREVALENCE: [[f64; NUM_PHENOTYPES]; 5] = [
    [
        0.2139, 0.0735, 0.1035, 0.3212, 0.1338, 0.1302, 0.2075, 0.0719, 0.2678, 0.3231, 0.0952,
        0.1927, 0.2902, 0.4194, 0.2686, 0.0732, 0.1324, 0.0889, 0.0517, 0.0406, 0.0873, 0.1388,
        0.1806, 0.1426, 0.0785,
    ],
    [
        0.1130, 0.0705, 0.0626, 0.1300, 0.0952, 0.0810, 0.0086, 0.0097, 0.1070, 0.0436, 0.0457,
        0.0070, 0.0603, 0.1854, 0.1196, 0.0586, 0.0181, 0.0271, 0.0273, 0.0047, 0.0282, 0.0915,
        0.2109, 0.0920, 0.0504,
    ],
    [
        0.1055, 0.0705, 0.0497, 0.0988, 0.0901, 0.0717, 0.0075, 0.0074, 0.0739, 0.0210, 0.0337,
        0.0031, 0.0075, 0.0770, 0.0828, 0.0511, 0.0091, 0.0254, 0.0224, 0.0047, 0.0200, 0.0948,
        0.1743, 0.1110, 0.0428,
    ],
    [
        0.0996, 0.0823, 0.0516, 0.1138, 0.0777, 0.0712, 0.0094, 0.0063, 0.0869, 0.0140, 0.0370,
        0.0020, 0.0306, 0.1587, 0.0968, 0.0573, 0.0121, 0.0329, 0.0212, 0.0050, 0.0251, 0.0912,
        0.2182, 0.1702, 0.0741,
    ],
    [
        0.1935, 0.0647, 0.0637, 0.2483, 0.1081, 0.1187, 0.0141, 0.0127, 0.1219, 0.0376, 0.0429,
        0.0108, 0.0792, 0.2011, 0.3463, 0.0743, 0.0164, 0.0720, 0.0445, 0.0077, 0.1221, 0.1709,
        0.2958, 0.1529, 0.1163,
    ],
];

const IHM_PREVALENCE: [f64; 5] = [0.1323, 0.1149, 0.0854, 0.1438, 0.1359];
const DECOMP_RATE: [f64; 5] = [0.0206, 0.0178, 0.0139, 0.0234, 0.0243];
const RLOS_HOURS: [f64; 5] = [135.39, 106.247, 105.379, 167.528, 113.196];
const CENTER_OFFSET: [f64; 5] = [0.0, 0.5, -0.3, 0.8, -0.6];

fn base_distributions() -> [ValueDist; NUM_CHANNELS] {
    let g = ValueDist::gaussian;
    [
        g(0.15, 0.35, 0.0, 1.0),
        g(60.0, 12.0, 20.0, 140.0),
        g(0.50, 0.18, 0.21, 1.0),
        g(3.2, 0.9, 1.0, 4.0),
        g(5.0, 1.3, 1.0, 6.0),
        g(12.5, 2.8, 3.0, 15.0),
        g(3.6, 1.4, 1.0, 5.0),
        g(135.0, 35.0, 40.0, 500.0),
        g(86.0, 15.0, 30.0, 200.0),
        g(170.0, 10.0, 130.0, 210.0),
        g(78.0, 12.0, 30.0, 160.0),
        g(96.5, 2.5, 60.0, 100.0),
        g(19.0, 5.0, 5.0, 50.0),
        g(120.0, 18.0, 60.0, 220.0),
        g(37.0, 0.6, 33.0, 41.0),
        g(82.0, 18.0, 35.0, 200.0),
        g(7.38, 0.08, 6.8, 7.8),
    ]
}

impl RegionProfile {
    /// Shipped profile for one of [`REGIONS`] (case-insensitive; `mimic`
    /// and `mimic-iii` both name the first).
    pub fn named(name: &str) -> Result<Self, ProfileError> {
        let idx = region_index(name).ok_or_else(|| ProfileError::UnknownRegion(name.to_string()))?;
        let mut distributions = base_distributions();
        let offset = CENTER_OFFSET[idx];
        for (c, d) in distributions.iter_mut().enumerate() {
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            d.center += sign * 0.1 * offset * d.scale;
        }
        if idx > 0 {
            // eICU regions: FiO2 concentrated near room air, narrower pH.
            distributions[schema::FIO2] = ValueDist {
                family: Family::LogNormal,
                center: 0.28,
                scale: 0.30,
                lower: 0.21,
                upper: 1.0,
            };
            distributions[schema::PH] = ValueDist::gaussian(7.39, 0.045, 6.8, 7.8);
        }
        Ok(RegionProfile {
            name: REGIONS[idx].to_string(),
            cohort_size: DEFAULT_COHORT_SIZE,
            frequencies: FREQUENCIES[idx],
            distributions,
            phenotype_prevalence: PHENOTYPE_PREVALENCE[idx],
            ihm_prevalence: IHM_PREVALENCE[idx],
            decomp_rate: DECOMP_RATE[idx],
            rlos_mean_hours: RLOS_HOURS[idx],
            shift: if idx == 0 { 0.0 } else { DEFAULT_SHIFT },
            center_offset: offset,
            pediatric_rate: 0.0,
            unknown_region_rate: 0.0,
            inconsistent_label_rate: 0.0,
            multi_stay_rate: 0.1,
        })
    }

    pub fn all_defaults() -> Vec<Self> {
        REGIONS.iter().map(|r| Self::named(r).expect("shipped region")).collect()
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let fail = |reason: String| {
            Err(ProfileError::InvalidProfile {
                profile: self.name.clone(),
                reason,
            })
        };
        if self.name.is_empty() {
            return fail("empty name".into());
        }
        if self.cohort_size == 0 {
            return fail("cohort_size must be at least 1".into());
        }
        for (c, f) in self.frequencies.iter().enumerate() {
            if !(f.is_finite() && *f >= 0.0) {
                return fail(format!("frequency of {} is {f}", CHANNEL_NAMES[c]));
            }
        }
        for (c, d) in self.distributions.iter().enumerate() {
            let ok = d.scale.is_finite()
                && d.scale >= 0.0
                && d.lower < d.upper
                && (d.family == Family::Gaussian || d.center > 0.0);
            if !ok {
                return fail(format!("bad distribution for {}", CHANNEL_NAMES[c]));
            }
        }
        let probabilities = self
            .phenotype_prevalence
            .iter()
            .chain([
                &self.ihm_prevalence,
                &self.decomp_rate,
                &self.shift,
                &self.pediatric_rate,
                &self.unknown_region_rate,
                &self.inconsistent_label_rate,
                &self.multi_stay_rate,
            ]);
        for p in probabilities {
            if !(0.0..=1.0).contains(p) {
                return fail(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.rlos_mean_hours.is_finite() && self.rlos_mean_hours > 0.0) {
            return fail("rlos_mean_hours must be positive".into());
        }
        Ok(())
    }

    /// Profile file: scalar keys plus `freq.<channel>`, `dist.<channel>`
    /// (`family center scale lower upper`) and `pheno.<short name>`.
    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new(self.name.clone());
        f.set("name", self.name.clone());
        f.set("cohort_size", self.cohort_size.to_string());
        f.set("ihm_prevalence", self.ihm_prevalence.to_string());
        f.set("decomp_rate", self.decomp_rate.to_string());
        f.set("rlos_mean_hours", self.rlos_mean_hours.to_string());
        f.set("shift", self.shift.to_string());
        f.set("center_offset", self.center_offset.to_string());
        f.set("pediatric_rate", self.pediatric_rate.to_string());
        f.set("unknown_region_rate", self.unknown_region_rate.to_string());
        f.set("inconsistent_label_rate", self.inconsistent_label_rate.to_string());
        f.set("multi_stay_rate", self.multi_stay_rate.to_string());
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            f.set(format!("freq.{name}"), self.frequencies[c].to_string());
        }
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            f.set(format!("dist.{name}"), self.distributions[c].render());
        }
        for (k, name) in PHENOTYPES.iter().enumerate() {
            f.set(format!("pheno.{name}"), self.phenotype_prevalence[k].to_string());
        }
        f
    }

    /// Reads a profile file. Keys left out fall back to the shipped profile
    /// named by `base` (default: the file's `name` when it is a known
    /// region, otherwise MIMIC-III).
    pub fn from_kv(f: &KvFile) -> Result<Self, ProfileError> {
        let name = f.require("name")?.to_string();
        let base_name = f.get("base").map(str::to_string).unwrap_or_else(|| {
            if region_index(&name).is_some() {
                name.clone()
            } else {
                REGIONS[0].to_string()
            }
        });
        let mut p = Self::named(&base_name)?;
        p.name = name;
        macro_rules! scalar {
            ($field:ident) => {
                if let Some(v) = f.parse_value(stringify!($field))? {
                    p.$field = v;
                }
            };
        }
        scalar!(cohort_size);
        scalar!(ihm_prevalence);
        scalar!(decomp_rate);
        scalar!(rlos_mean_hours);
        scalar!(shift);
        scalar!(center_offset);
        scalar!(pediatric_rate);
        scalar!(unknown_region_rate);
        scalar!(inconsistent_label_rate);
        scalar!(multi_stay_rate);
        for (c, channel) in CHANNEL_NAMES.iter().enumerate() {
            if let Some(v) = f.parse_value(&format!("freq.{channel}"))? {
                p.frequencies[c] = v;
            }
            let key = format!("dist.{channel}");
            if let Some(raw) = f.get(&key) {
                p.distributions[c] = ValueDist::parse(raw).ok_or_else(|| f.invalid(&key, raw))?;
            }
        }
        for (k, pheno) in PHENOTYPES.iter().enumerate() {
            if let Some(v) = f.parse_value(&format!("pheno.{pheno}"))? {
                p.phenotype_prevalence[k] = v;
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self, ProfileError> {
        Self::from_kv(&KvFile::read(path)?)
    }
}

/// Index into [`REGIONS`] for a case-insensitive region name.
pub fn region_index(name: &str) -> Option<usize> {
    let lower = name.to_ascii_lowercase();
    match lower.as_str() {
        "mimic" | "mimic-iii" | "mimic3" | "mimiciii" => Some(0),
        _ => REGIONS.iter().position(|r| r.to_ascii_lowercase() == lower),
    }
}
