//! Dilation genotypes and the per-stage candidate sets they are searched over.
//!
//! A [`Genotype`] is a `(d_h, d_w)` dilation pair for a 3×3 convolution. Each
//! searchable stage (3, 4 and 5) carries an ordered, duplicate-free list of
//! genotypes; the position in that list is the genotype index used by alpha
//! tables and decoding. Index 0 is always the identity dilation `(1, 1)` for
//! the built-in settings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stages whose middle 3×3 convolutions are searchable.
pub const SEARCHABLE_STAGES: [u8; 3] = [3, 4, 5];

/// A dilation pair `(d_h, d_w)`, both at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 2]", into = "[u32; 2]")]
pub struct Genotype {
    dh: u32,
    dw: u32,
}

impl Genotype {
    pub const IDENTITY: Genotype = Genotype { dh: 1, dw: 1 };

    pub fn new(dh: u32, dw: u32) -> Result<Self> {
        if dh == 0 || dw == 0 {
            return Err(Error::Config(format!(
                "dilation must be positive, got ({dh}, {dw})"
            )));
        }
        Ok(Genotype { dh, dw })
    }

    /// Scalar dilation `d` expanded to `(d, d)`.
    pub fn symmetric(d: u32) -> Result<Self> {
        Self::new(d, d)
    }

    pub fn dh(self) -> u32 {
        self.dh
    }

    pub fn dw(self) -> u32 {
        self.dw
    }

    pub fn is_symmetric(self) -> bool {
        self.dh == self.dw
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }
}

impl TryFrom<[u32; 2]> for Genotype {
    type Error = Error;

    fn try_from(v: [u32; 2]) -> Result<Self> {
        Genotype::new(v[0], v[1])
    }
}

impl From<Genotype> for [u32; 2] {
    fn from(g: Genotype) -> Self {
        [g.dh, g.dw]
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_symmetric() {
            write!(f, "{}", self.dh)
        } else {
            write!(f, "({},{})", self.dh, self.dw)
        }
    }
}

/// Named candidate-set presets. `Custom` carries user-supplied stage lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
    #[serde(rename = "custom")]
    Custom,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            "C" | "c" => Ok(Setting::C),
            "custom" => Ok(Setting::Custom),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

/// Ordered genotype list for one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpace {
    stage_id: u8,
    genotypes: Vec<Genotype>,
}

impl StageSpace {
    pub fn new(stage_id: u8, genotypes: Vec<Genotype>) -> Result<Self> {
        if !SEARCHABLE_STAGES.contains(&stage_id) {
            return Err(Error::Config(format!(
                "stage {stage_id} is not searchable (expected one of 3, 4, 5)"
            )));
        }
        if genotypes.is_empty() {
            return Err(Error::Config(format!(
                "stage {stage_id} has an empty genotype list"
            )));
        }
        for (i, g) in genotypes.iter().enumerate() {
            if genotypes[..i].contains(g) {
                return Err(Error::Config(format!(
                    "stage {stage_id} lists genotype {g} twice"
                )));
            }
        }
        Ok(StageSpace {
            stage_id,
            genotypes,
        })
    }

    pub fn stage_id(&self) -> u8 {
        self.stage_id
    }

    pub fn genotypes(&self) -> &[Genotype] {
        &self.genotypes
    }

    /// Candidate count `G`.
    pub fn len(&self) -> usize {
        self.genotypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genotypes.is_empty()
    }

    pub fn index_of(&self, g: Genotype) -> Option<usize> {
        self.genotypes.iter().position(|&x| x == g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    FixedGroupCount,
    FixedChannelsPerGroup,
}

/// A full search space: candidate lists for stages 3–5 plus the channel grouping rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSearchSpace", into = "RawSearchSpace")]
pub struct SearchSpaceConfig {
    setting: Setting,
    grouping_mode: GroupingMode,
    grouping_value: usize,
    stages: BTreeMap<u8, StageSpace>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSearchSpace {
    setting: Setting,
    grouping_mode: GroupingMode,
    grouping_value: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<BTreeMap<String, Vec<Genotype>>>,
}

impl TryFrom<RawSearchSpace> for SearchSpaceConfig {
    type Error = Error;

    fn try_from(raw: RawSearchSpace) -> Result<Self> {
        let stages = match raw.stages {
            Some(map) => {
                let mut stages = BTreeMap::new();
                for (key, list) in map {
                    let id: u8 = key.parse().map_err(|_| {
                        Error::schema(format!("stages.{key}"), "stage key must be 3, 4 or 5")
                    })?;
                    stages.insert(id, StageSpace::new(id, list)?);
                }
                stages
            }
            None => default_stages(raw.setting)?,
        };
        SearchSpaceConfig::new(raw.setting, stages, raw.grouping_mode, raw.grouping_value)
    }
}

impl From<SearchSpaceConfig> for RawSearchSpace {
    fn from(cfg: SearchSpaceConfig) -> Self {
        RawSearchSpace {
            setting: cfg.setting,
            grouping_mode: cfg.grouping_mode,
            grouping_value: cfg.grouping_value,
            stages: Some(
                cfg.stages
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.genotypes))
                    .collect(),
            ),
        }
    }
}

fn sym(ds: &[u32]) -> Vec<Genotype> {
    ds.iter().map(|&d| Genotype { dh: d, dw: d }).collect()
}

fn pairs(ps: &[(u32, u32)]) -> Vec<Genotype> {
    ps.iter().map(|&(dh, dw)| Genotype { dh, dw }).collect()
}

fn default_stages(setting: Setting) -> Result<BTreeMap<u8, StageSpace>> {
    let (s34, s5) = match setting {
        Setting::A => (sym(&[1, 3]), sym(&[1, 3, 5])),
        Setting::B => (sym(&[1, 2, 3]), sym(&[1, 2, 3, 4, 5])),
        Setting::C => {
            let mut s34 = sym(&[1, 2, 3]);
            s34.extend(pairs(&[(1, 3), (3, 1)]));
            let mut s5 = sym(&[1, 2, 3, 4, 5]);
            s5.extend(pairs(&[(1, 3), (3, 1), (1, 5), (5, 1)]));
            (s34, s5)
        }
        Setting::Custom => {
            return Err(Error::Config(
                "setting `custom` has no default candidate sets; list `stages` explicitly".into(),
            ))
        }
    };
    let mut stages = BTreeMap::new();
    stages.insert(3, StageSpace::new(3, s34.clone())?);
    stages.insert(4, StageSpace::new(4, s34)?);
    stages.insert(5, StageSpace::new(5, s5)?);
    Ok(stages)
}

/// Built-in candidate sets for setting A, B or C, grouped into 16 channel groups.
pub fn default_space(setting: Setting) -> Result<SearchSpaceConfig> {
    SearchSpaceConfig::new(
        setting,
        default_stages(setting)?,
        GroupingMode::FixedGroupCount,
        16,
    )
}

impl SearchSpaceConfig {
    pub fn new(
        setting: Setting,
        stages: BTreeMap<u8, StageSpace>,
        grouping_mode: GroupingMode,
        grouping_value: usize,
    ) -> Result<Self> {
        let ids: Vec<u8> = stages.keys().copied().collect();
        if ids != SEARCHABLE_STAGES {
            return Err(Error::Config(format!(
                "search space must cover exactly stages 3, 4, 5; got {ids:?}"
            )));
        }
        if grouping_value == 0 {
            return Err(Error::schema("grouping_value", "must be at least 1"));
        }
        Ok(SearchSpaceConfig {
            setting,
            grouping_mode,
            grouping_value,
            stages,
        })
    }

    /// Same candidate sets, different grouping rule.
    pub fn with_grouping(mut self, mode: GroupingMode, value: usize) -> Result<Self> {
        if value == 0 {
            return Err(Error::schema("grouping_value", "must be at least 1"));
        }
        self.grouping_mode = mode;
        self.grouping_value = value;
        Ok(self)
    }

    /// A space offering only the identity dilation at every stage.
    pub fn identity(grouping_mode: GroupingMode, grouping_value: usize) -> Result<Self> {
        let mut stages = BTreeMap::new();
        for id in SEARCHABLE_STAGES {
            stages.insert(id, StageSpace::new(id, vec![Genotype::IDENTITY])?);
        }
        Self::new(Setting::Custom, stages, grouping_mode, grouping_value)
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn grouping_mode(&self) -> GroupingMode {
        self.grouping_mode
    }

    pub fn grouping_value(&self) -> usize {
        self.grouping_value
    }

    pub fn stage(&self, stage_id: u8) -> Result<&StageSpace> {
        self.stages
            .get(&stage_id)
            .ok_or_else(|| Error::Config(format!("stage {stage_id} is not searchable")))
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageSpace> {
        self.stages.values()
    }

    /// Canonical JSON used for digests and provenance records.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("search space serializes")
    }
}

/// Number of channel groups `N` for a layer with `out_channels` outputs.
pub fn group_count_for_layer(
    cfg: &SearchSpaceConfig,
    layer: &str,
    out_channels: usize,
) -> Result<usize> {
    if out_channels == 0 {
        return Err(Error::Config(format!("layer {layer} has zero output channels")));
    }
    let v = cfg.grouping_value;
    match cfg.grouping_mode {
        GroupingMode::FixedGroupCount => {
            if !out_channels.is_multiple_of(v) {
                return Err(Error::Config(format!(
                    "layer {layer}: {out_channels} output channels cannot be split into {v} equal groups"
                )));
            }
            Ok(v)
        }
        GroupingMode::FixedChannelsPerGroup => {
            if !out_channels.is_multiple_of(v) {
                return Err(Error::Config(format!(
                    "layer {layer}: {out_channels} output channels are not a multiple of {v} channels per group"
                )));
            }
            Ok(out_channels / v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(dh: u32, dw: u32) -> Genotype {
        Genotype::new(dh, dw).unwrap()
    }

    #[test]
    fn setting_c_stage5() {
        let cfg = default_space(Setting::C).unwrap();
        let s5 = cfg.stage(5).unwrap();
        assert_eq!(
            s5.genotypes(),
            &[
                g(1, 1),
                g(2, 2),
                g(3, 3),
                g(4, 4),
                g(5, 5),
                g(1, 3),
                g(3, 1),
                g(1, 5),
                g(5, 1)
            ]
        );
        assert_eq!(s5.len(), 9);
    }

    #[test]
    fn setting_a_and_b() {
        let a = default_space(Setting::A).unwrap();
        assert_eq!(a.stage(3).unwrap().genotypes(), &[g(1, 1), g(3, 3)]);
        assert_eq!(a.stage(5).unwrap().genotypes(), &[g(1, 1), g(3, 3), g(5, 5)]);
        let b = default_space(Setting::B).unwrap();
        assert_eq!(b.stage(4).unwrap().genotypes(), &[g(1, 1), g(2, 2), g(3, 3)]);
    }

    #[test]
    fn settings_are_nested_and_start_with_identity() {
        let spaces: Vec<_> = [Setting::A, Setting::B, Setting::C]
            .into_iter()
            .map(|s| default_space(s).unwrap())
            .collect();
        for cfg in &spaces {
            for st in cfg.stages() {
                assert_eq!(st.genotypes()[0], Genotype::IDENTITY);
            }
        }
        for pair in spaces.windows(2) {
            for id in SEARCHABLE_STAGES {
                let small = pair[0].stage(id).unwrap().genotypes();
                let big = pair[1].stage(id).unwrap().genotypes();
                assert!(small.iter().all(|x| big.contains(x)));
                assert!(big.len() > small.len());
            }
        }
    }

    #[test]
    fn asymmetric_pairs_are_distinct() {
        assert_ne!(g(1, 3), g(3, 1));
        assert!(Genotype::new(0, 1).is_err());
    }

    #[test]
    fn stage_space_rejects_duplicates_and_empty() {
        assert!(StageSpace::new(3, vec![]).is_err());
        assert!(StageSpace::new(3, vec![g(1, 1), g(1, 1)]).is_err());
        assert!(StageSpace::new(2, vec![g(1, 1)]).is_err());
    }

    #[test]
    fn custom_setting_has_no_default() {
        assert!(matches!(default_space(Setting::Custom), Err(Error::Config(_))));
        assert!("D".parse::<Setting>().is_err());
    }

    #[test]
    fn group_counts() {
        let cfg = default_space(Setting::C).unwrap();
        assert_eq!(group_count_for_layer(&cfg, "3.0", 256).unwrap(), 16);
        let per = cfg
            .clone()
            .with_grouping(GroupingMode::FixedChannelsPerGroup, 32)
            .unwrap();
        assert_eq!(group_count_for_layer(&per, "3.0", 256).unwrap(), 8);
        let three = cfg.with_grouping(GroupingMode::FixedGroupCount, 3).unwrap();
        let err = group_count_for_layer(&three, "4.1", 256).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4.1") && msg.contains("256") && msg.contains('3'), "{msg}");
    }

    #[test]
    fn json_round_trip_and_shape() {
        let cfg = default_space(Setting::C).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["setting"], "C");
        assert_eq!(v["grouping_mode"], "fixed_group_count");
        assert_eq!(v["grouping_value"], 16);
        assert_eq!(v["stages"]["3"][0], serde_json::json!([1, 1]));
        let back: SearchSpaceConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn json_without_stages_uses_defaults() {
        let cfg: SearchSpaceConfig = serde_json::from_str(
            r#"{"setting":"B","grouping_mode":"fixed_channels_per_group","grouping_value":8}"#,
        )
        .unwrap();
        assert_eq!(cfg.stage(5).unwrap().len(), 5);
        let bad = serde_json::from_str::<SearchSpaceConfig>(
            r#"{"setting":"B","grouping_mode":"fixed_group_count","grouping_value":0}"#,
        );
        assert!(bad.is_err());
        let missing = serde_json::from_str::<SearchSpaceConfig>(
            r#"{"setting":"custom","grouping_mode":"fixed_group_count","grouping_value":1,"stages":{"3":[[1,1]],"4":[[1,1]]}}"#,
        );
        assert!(missing.is_err());
    }
}
