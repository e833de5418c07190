//! Modality random missing (MRM): frame drops inside a modality and
//! whole-modality drops, both realised by zeroing raw features.

use std::fmt;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datasets::{Modality, ModalitySample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

/// A subset of `{l, a, v}`, written as e.g. `"la"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    /// The seven nonempty subsets in evaluation-table order:
    /// `{l} {a} {v} {l,a} {l,v} {a,v} {l,a,v}`.
    pub fn nonempty_subsets() -> [ModalitySet; 7] {
        [0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111].map(ModalitySet)
    }

    pub fn from_modalities(ms: &[Modality]) -> Self {
        ModalitySet(ms.iter().fold(0, |acc, m| acc | (1 << m.index())))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    pub fn letters(self) -> String {
        self.iter().map(Modality::letter).collect()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner: Vec<String> = self.iter().map(|m| m.letter().to_string()).collect();
        write!(f, "{{{}}}", inner.join(","))
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = 0u8;
        for c in s.chars().filter(|c| !matches!(c, '{' | '}' | ',' | ' ')) {
            let m = Modality::from_letter(c)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown modality `{c}` in `{s}`")))?;
            set |= 1 << m.index();
        }
        Ok(ModalitySet(set))
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.letters())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// Drop exactly the configured ratios and modalities.
    Fixed,
    /// Resample ratios in `[0, p_max)` and a nonempty availability set per call.
    RandomTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingnessSpec {
    pub p_l: f64,
    pub p_a: f64,
    pub p_v: f64,
    pub available: ModalitySet,
    pub mode: MissingMode,
    pub p_max: f64,
}

impl Default for MissingnessSpec {
    fn default() -> Self {
        MissingnessSpec::complete()
    }
}

fn fmt_ratio(p: f64) -> String {
    let s = format!("{p:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl MissingnessSpec {
    /// Fixed mode, nothing dropped.
    pub fn complete() -> Self {
        MissingnessSpec {
            p_l: 0.0,
            p_a: 0.0,
            p_v: 0.0,
            available: ModalitySet::ALL,
            mode: MissingMode::Fixed,
            p_max: 0.5,
        }
    }

    pub fn fixed(available: ModalitySet, p: f64) -> Self {
        MissingnessSpec {
            p_l: p,
            p_a: p,
            p_v: p,
            available,
            ..Self::complete()
        }
    }

    pub fn random_train(p_max: f64) -> Self {
        MissingnessSpec {
            mode: MissingMode::RandomTrain,
            p_max,
            ..Self::complete()
        }
    }

    pub fn ratio(&self, m: Modality) -> f64 {
        [self.p_l, self.p_a, self.p_v][m.index()]
    }

    fn ratios(&self) -> [f64; 3] {
        [self.p_l, self.p_a, self.p_v]
    }

    pub fn validate(&self) -> Result<()> {
        for (m, p) in Modality::ALL.iter().zip(self.ratios()) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("p_{m} = {p} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::InvalidConfig(format!("p_max = {} outside [0, 1]", self.p_max)));
        }
        if self.mode == MissingMode::Fixed && self.available.is_empty() {
            return Err(Error::InvalidConfig(
                "fixed-mode missingness with no available modality leaves no information".into(),
            ));
        }
        Ok(())
    }

    /// Row label used in reports: `{l,a}` for inter-modality conditions,
    /// `p=0.3` for uniform intra-modality conditions on all modalities.
    pub fn condition_label(&self) -> String {
        let r = self.ratios();
        if r.iter().all(|&p| p == 0.0) {
            self.available.to_string()
        } else if self.available == ModalitySet::ALL && r.iter().all(|&p| p == r[0]) {
            format!("p={}", fmt_ratio(r[0]))
        } else {
            format!(
                "{}@{}/{}/{}",
                self.available,
                fmt_ratio(r[0]),
                fmt_ratio(r[1]),
                fmt_ratio(r[2])
            )
        }
    }
}

/// Per-modality frame masks (`true` = kept) and availability flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingnessPattern {
    pub frame_mask: [Vec<bool>; 3],
    pub modality_flag: [bool; 3],
}

impl MissingnessPattern {
    pub fn identity(seq_lens: [usize; 3]) -> Self {
        MissingnessPattern {
            frame_mask: seq_lens.map(|t| vec![true; t]),
            modality_flag: [true; 3],
        }
    }

    pub fn dropped_frames(&self, m: Modality) -> usize {
        self.frame_mask[m.index()].iter().filter(|&&k| !k).count()
    }
}

/// `round(p * T)`, halves rounded away from zero.
pub fn drop_count(p: f64, frames: usize) -> usize {
    ((p * frames as f64).round() as usize).min(frames)
}

pub fn sample_pattern(spec: &MissingnessSpec, seq_lens: [usize; 3], rng_seed: u64) -> Result<MissingnessPattern> {
    spec.validate()?;
    let mut rng = seed::rng(rng_seed, &[0x3A55]);
    let (ratios, available) = match spec.mode {
        MissingMode::Fixed => (spec.ratios(), spec.available),
        MissingMode::RandomTrain => {
            let ratios = std::array::from_fn(|_| {
                if spec.p_max > 0.0 {
                    rng.random_range(0.0..spec.p_max)
                } else {
                    0.0
                }
            });
            let subsets = ModalitySet::nonempty_subsets();
            (ratios, subsets[rng.random_range(0..subsets.len())])
        }
    };
    let mut pattern = MissingnessPattern::identity(seq_lens);
    for m in Modality::ALL {
        let i = m.index();
        if !available.contains(m) {
            pattern.modality_flag[i] = false;
            continue;
        }
        let frames = seq_lens[i];
        for t in index::sample(&mut rng, frames, drop_count(ratios[i], frames)) {
            pattern.frame_mask[i][t] = false;
        }
    }
    Ok(pattern)
}

pub fn apply_mrm<T: Scalar>(sample: &ModalitySample<T>, pattern: &MissingnessPattern) -> Result<ModalitySample<T>> {
    let mut out = sample.clone();
    for m in Modality::ALL {
        let i = m.index();
        let x = &mut out.x[i];
        if pattern.frame_mask[i].len() != x.nrows() {
            return Err(Error::Shape(format!(
                "sample {}: pattern for {m} has {} frames, sample has {}",
                sample.id,
                pattern.frame_mask[i].len(),
                x.nrows()
            )));
        }
        if !pattern.modality_flag[i] {
            *x = Array2::zeros(x.raw_dim());
            continue;
        }
        for (t, &keep) in pattern.frame_mask[i].iter().enumerate() {
            if !keep {
                x.row_mut(t).fill(T::zero());
            }
        }
    }
    Ok(out)
}

/// The 17 evaluation conditions: seven inter-modality availability sets with
/// no frame drops, then intra-modality ratios 0.1..=1.0 on all modalities.
pub fn test_condition_grid() -> Vec<MissingnessSpec> {
    let inter = ModalitySet::nonempty_subsets()
        .into_iter()
        .map(|set| MissingnessSpec::fixed(set, 0.0));
    let intra = (1..=10).map(|k| MissingnessSpec::fixed(ModalitySet::ALL, k as f64 / 10.0));
    inter.chain(intra).collect()
}

/// Expected number of inter-modality rows in [`test_condition_grid`].
pub const INTER_CONDITIONS: usize = 7;
