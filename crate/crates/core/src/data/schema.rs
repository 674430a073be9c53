//! The 17-channel measurement schema and its 76-column discretized layout.
//!
//! Discretized rows hold, in channel order, one column per continuous
//! channel or a one-hot block per categorical channel (59 value columns),
//! followed by one imputation-mask column per channel (17 columns).

use serde::{Deserialize, Serialize};

use crate::kv::{KvError, KvFile};

pub const NUM_CHANNELS: usize = 17;

pub const CAPILLARY_REFILL: usize = 0;
pub const DIASTOLIC_BP: usize = 1;
pub const FIO2: usize = 2;
pub const GCS_EYE: usize = 3;
pub const GCS_MOTOR: usize = 4;
pub const GCS_TOTAL: usize = 5;
pub const GCS_VERBAL: usize = 6;
pub const GLUCOSE: usize = 7;
pub const HEART_RATE: usize = 8;
pub const HEIGHT: usize = 9;
pub const MEAN_BP: usize = 10;
pub const OXYGEN_SATURATION: usize = 11;
pub const RESPIRATORY_RATE: usize = 12;
pub const SYSTOLIC_BP: usize = 13;
pub const TEMPERATURE: usize = 14;
pub const WEIGHT: usize = 15;
pub const PH: usize = 16;

/// Column names used in episode files.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "Capillary refill rate",
    "Diastolic blood pressure",
    "Fraction inspired oxygen",
    "Glascow coma scale eye opening",
    "Glascow coma scale motor response",
    "Glascow coma scale total",
    "Glascow coma scale verbal response",
    "Glucose",
    "Heart Rate",
    "Height",
    "Mean blood pressure",
    "Oxygen saturation",
    "Respiratory rate",
    "Systolic blood pressure",
    "Temperature",
    "Weight",
    "pH",
];

/// Short names used in frequency tables.
pub const SHORT_NAMES: [&str; NUM_CHANNELS] = [
    "Capillary", "DBP", "FiO2", "GCS Eyes", "GCS Motor", "GCS Total", "GCS Verbal", "Glucose",
    "HR", "Height", "MAP", "O2 Sat", "RR", "SBP", "Temperature", "Weight", "pH",
];

/// Alternative column names merged into a schema channel at ingestion.
pub const STANDARD_ALIASES: [(&str, usize); 6] = [
    ("Invasive mean blood pressure", MEAN_BP),
    ("Non-invasive mean blood pressure", MEAN_BP),
    ("Invasive systolic blood pressure", SYSTOLIC_BP),
    ("Non-invasive systolic blood pressure", SYSTOLIC_BP),
    ("Invasive diastolic blood pressure", DIASTOLIC_BP),
    ("Non-invasive diastolic blood pressure", DIASTOLIC_BP),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub label: String,
    pub code: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ChannelKind {
    Continuous,
    /// One-hot encoded; a value maps to the first category with its code.
    Categorical(Vec<Category>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    /// Fallback used when nothing can be forward-filled.
    pub normal: f64,
}

impl ChannelSpec {
    pub fn width(&self) -> usize {
        match &self.kind {
            ChannelKind::Continuous => 1,
            ChannelKind::Categorical(c) => c.len(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ChannelKind::Categorical(_))
    }

    pub fn category_index(&self, value: f64) -> Option<usize> {
        match &self.kind {
            ChannelKind::Continuous => None,
            ChannelKind::Categorical(c) => c.iter().position(|cat| cat.code == value),
        }
    }

    /// Parses an episode-file cell: a number, or a category label.
    pub fn parse_cell(&self, cell: &str) -> Option<f64> {
        if let Ok(v) = cell.parse::<f64>() {
            return Some(v);
        }
        match &self.kind {
            ChannelKind::Categorical(c) => c.iter().find(|cat| cat.label == cell).map(|cat| cat.code),
            ChannelKind::Continuous => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("schema has {0} channels, expected {NUM_CHANNELS}")]
    ChannelCount(usize),
    #[error("schema width is {0}, expected 76")]
    Width(usize),
    #[error("channel {channel}: normal value {value} is not a listed category")]
    NormalNotCategory { channel: String, value: f64 },
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    pub channels: Vec<ChannelSpec>,
    pub aliases: Vec<(String, usize)>,
}

/// Total discretized width of the shipped schema.
pub const INPUT_WIDTH: usize = 76;

fn categories(pairs: &[(&str, f64)]) -> ChannelKind {
    ChannelKind::Categorical(
        pairs
            .iter()
            .map(|(label, code)| Category {
                label: label.to_string(),
                code: *code,
            })
            .collect(),
    )
}

impl ChannelSchema {
    /// The 17-channel schema with the reference benchmark's category lists
    /// and a clinically plausible normal-value table.
    pub fn standard() -> Self {
        use ChannelKind::Continuous;
        let eye = categories(&[
            ("1 No Response", 1.0),
            ("2 To pain", 2.0),
            ("3 To speech", 3.0),
            ("4 Spontaneously", 4.0),
            ("None", 1.0),
            ("To Pain", 2.0),
            ("To Speech", 3.0),
            ("Spontaneously", 4.0),
        ]);
        let motor = categories(&[
            ("1 No Response", 1.0),
            ("2 Abnorm extensn", 2.0),
            ("3 Abnorm flexion", 3.0),
            ("4 Flex-withdraws", 4.0),
            ("5 Localizes Pain", 5.0),
            ("6 Obeys Commands", 6.0),
            ("Abnormal Flexion", 3.0),
            ("Abnormal extension", 2.0),
            ("Flex-withdraws", 4.0),
            ("Localizes Pain", 5.0),
            ("No response", 1.0),
            ("Obeys Commands", 6.0),
        ]);
        let total_pairs: Vec<(String, f64)> = (3..=15).map(|v| (v.to_string(), f64::from(v))).collect();
        let total = ChannelKind::Categorical(
            total_pairs
                .into_iter()
                .map(|(label, code)| Category { label, code })
                .collect(),
        );
        let verbal = categories(&[
            ("1 No Response", 1.0),
            ("1.0 ET/Trach", 1.0),
            ("2 Incomp sounds", 2.0),
            ("3 Inapprop words", 3.0),
            ("4 Confused", 4.0),
            ("5 Oriented", 5.0),
            ("Confused", 4.0),
            ("Inappropriate Words", 3.0),
            ("Incomprehensible sounds", 2.0),
            ("No Response", 1.0),
            ("No Response-ETT", 1.0),
            ("Oriented", 5.0),
        ]);
        let capillary = categories(&[("0.0", 0.0), ("1.0", 1.0)]);

        let specs: [(ChannelKind, f64); NUM_CHANNELS] = [
            (capillary, 0.0),
            (Continuous, 59.0),
            (Continuous, 0.21),
            (eye, 4.0),
            (motor, 6.0),
            (total, 15.0),
            (verbal, 5.0),
            (Continuous, 128.0),
            (Continuous, 86.0),
            (Continuous, 170.0),
            (Continuous, 77.0),
            (Continuous, 98.0),
            (Continuous, 19.0),
            (Continuous, 118.0),
            (Continuous, 37.0),
            (Continuous, 81.0),
            (Continuous, 7.4),
        ];
        let channels = specs
            .into_iter()
            .zip(CHANNEL_NAMES)
            .map(|((kind, normal), name)| ChannelSpec {
                name: name.to_string(),
                kind,
                normal,
            })
            .collect();
        ChannelSchema {
            channels,
            aliases: STANDARD_ALIASES.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.value_width() + self.channels.len()
    }

    pub fn value_width(&self) -> usize {
        self.channels.iter().map(ChannelSpec::width).sum()
    }

    /// First value column of each channel.
    pub fn value_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.channels.len());
        let mut at = 0;
        for c in &self.channels {
            offsets.push(at);
            at += c.width();
        }
        offsets
    }

    pub fn mask_column(&self, channel: usize) -> usize {
        self.value_width() + channel
    }

    /// Channel index for a file column name, honouring aliases.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels
            .iter()
            .position(|c| c.name == name)
            .or_else(|| self.aliases.iter().find(|(a, _)| a == name).map(|(_, c)| *c))
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.channels.len() != NUM_CHANNELS {
            return Err(SchemaError::ChannelCount(self.channels.len()));
        }
        if self.width() != INPUT_WIDTH {
            return Err(SchemaError::Width(self.width()));
        }
        for c in &self.channels {
            if c.is_categorical() && c.category_index(c.normal).is_none() {
                return Err(SchemaError::NormalNotCategory {
                    channel: c.name.clone(),
                    value: c.normal,
                });
            }
        }
        Ok(())
    }

    /// Schema file: `channel.<i>.name`, `channel.<i>.kind`
    /// (`continuous`|`categorical`), `channel.<i>.categories`
    /// (`label:code; label:code; ...`), `channel.<i>.normal`, and
    /// `alias.<column name> = <channel index>`.
    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new("schema");
        for (i, c) in self.channels.iter().enumerate() {
            f.set(format!("channel.{i}.name"), c.name.clone());
            match &c.kind {
                ChannelKind::Continuous => f.set(format!("channel.{i}.kind"), "continuous"),
                ChannelKind::Categorical(cats) => {
                    f.set(format!("channel.{i}.kind"), "categorical");
                    let list: Vec<String> = cats.iter().map(|c| format!("{}:{}", c.label, c.code)).collect();
                    f.set(format!("channel.{i}.categories"), list.join("; "));
                }
            }
            f.set(format!("channel.{i}.normal"), c.normal.to_string());
        }
        for (name, idx) in &self.aliases {
            f.set(format!("alias.{name}"), idx.to_string());
        }
        f
    }

    pub fn from_kv(f: &KvFile) -> Result<Self, SchemaError> {
        let mut channels = Vec::new();
        for i in 0.. {
            let Some(name) = f.get(&format!("channel.{i}.name")) else { break };
            let kind_key = format!("channel.{i}.kind");
            let kind = match f.require(&kind_key)? {
                "continuous" => ChannelKind::Continuous,
                "categorical" => {
                    let key = format!("channel.{i}.categories");
                    let raw = f.require(&key)?;
                    let mut cats = Vec::new();
                    for item in raw.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                        let (label, code) = item.rsplit_once(':').ok_or_else(|| f.invalid(&key, raw))?;
                        let code = code.trim().parse().map_err(|_| f.invalid(&key, raw))?;
                        cats.push(Category {
                            label: label.trim().to_string(),
                            code,
                        });
                    }
                    ChannelKind::Categorical(cats)
                }
                other => return Err(f.invalid(&kind_key, other).into()),
            };
            let normal = f.parse_required(&format!("channel.{i}.normal"))?;
            channels.push(ChannelSpec {
                name: name.to_string(),
                kind,
                normal,
            });
        }
        let mut aliases = Vec::new();
        for (name, idx) in f.with_prefix("alias.") {
            let idx = idx.parse().map_err(|_| f.invalid(name, idx))?;
            aliases.push((name.to_string(), idx));
        }
        let schema = ChannelSchema { channels, aliases };
        schema.validate()?;
        Ok(schema)
    }

    /// Normal-value table: `<channel name> = <value>`.
    pub fn normal_values_kv(&self) -> KvFile {
        let mut f = KvFile::new("normal_values");
        for c in &self.channels {
            f.set(c.name.clone(), c.normal.to_string());
        }
        f
    }

    pub fn apply_normal_values(&mut self, f: &KvFile) -> Result<(), SchemaError> {
        for c in &mut self.channels {
            if let Some(v) = f.parse_value::<f64>(&c.name)? {
                c.normal = v;
            }
        }
        self.validate()
    }
}
