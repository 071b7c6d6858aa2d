//! PASI arithmetic: regional scores from ordinal sub-scores and the
//! region-weighted absolute score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PASI_MAX: f64 = 72.0;

/// The four body regions scored by PASI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "HN")]
    HeadNeck,
    #[serde(rename = "UE")]
    UpperExtremities,
    #[serde(rename = "LE")]
    LowerExtremities,
    #[serde(rename = "TR")]
    Trunk,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::HeadNeck,
        Region::UpperExtremities,
        Region::LowerExtremities,
        Region::Trunk,
    ];

    /// Region weight in tenths. Kept integral so the weights sum to exactly one.
    const fn weight_tenths(self) -> u32 {
        match self {
            Region::HeadNeck => 1,
            Region::UpperExtremities => 2,
            Region::LowerExtremities => 4,
            Region::Trunk => 3,
        }
    }

    pub fn weight(self) -> f64 {
        f64::from(self.weight_tenths()) / 10.0
    }

    /// Number of photos expected per region set.
    pub const fn image_count(self) -> usize {
        match self {
            Region::HeadNeck => 12,
            Region::UpperExtremities => 18,
            Region::LowerExtremities => 13,
            Region::Trunk => 10,
        }
    }

    pub const fn index(self) -> usize {
        match self {
            Region::HeadNeck => 0,
            Region::UpperExtremities => 1,
            Region::LowerExtremities => 2,
            Region::Trunk => 3,
        }
    }

    pub const fn code(self) -> &'static str {
        match self {
            Region::HeadNeck => "HN",
            Region::UpperExtremities => "UE",
            Region::LowerExtremities => "LE",
            Region::Trunk => "TR",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HN" => Ok(Region::HeadNeck),
            "UE" => Ok(Region::UpperExtremities),
            "LE" => Ok(Region::LowerExtremities),
            "TR" => Ok(Region::Trunk),
            other => Err(Error::validation(
                "region",
                format!("unknown region code {other:?} (expected HN, UE, LE or TR)"),
            )),
        }
    }
}

/// One value per region, indexed by [`Region`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerRegion<T>(pub [T; 4]);

impl<T> PerRegion<T> {
    pub fn from_fn(mut f: impl FnMut(Region) -> T) -> Self {
        PerRegion(Region::ALL.map(&mut f))
    }

    pub fn get(&self, region: Region) -> &T {
        &self.0[region.index()]
    }

    pub fn get_mut(&mut self, region: Region) -> &mut T {
        &mut self.0[region.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Region, &T)> {
        Region::ALL.into_iter().zip(self.0.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Region, &mut T)> {
        Region::ALL.into_iter().zip(self.0.iter_mut())
    }

    pub fn map<U>(&self, mut f: impl FnMut(Region, &T) -> U) -> PerRegion<U> {
        PerRegion::from_fn(|r| f(r, self.get(r)))
    }
}

impl<T> std::ops::Index<Region> for PerRegion<T> {
    type Output = T;
    fn index(&self, region: Region) -> &T {
        self.get(region)
    }
}

impl<T> std::ops::IndexMut<Region> for PerRegion<T> {
    fn index_mut(&mut self, region: Region) -> &mut T {
        self.get_mut(region)
    }
}

/// Ordinal sub-scores for one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeverityComponents {
    pub erythema: u8,
    pub induration: u8,
    pub desquamation: u8,
    pub area_score: u8,
}

impl SeverityComponents {
    pub const SEVERITY_MAX: u8 = 4;
    pub const AREA_MAX: u8 = 6;

    pub fn new(erythema: u8, induration: u8, desquamation: u8, area_score: u8) -> Result<Self> {
        let c = SeverityComponents {
            erythema,
            induration,
            desquamation,
            area_score,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value, max) in [
            ("erythema", self.erythema, Self::SEVERITY_MAX),
            ("induration", self.induration, Self::SEVERITY_MAX),
            ("desquamation", self.desquamation, Self::SEVERITY_MAX),
            ("area_score", self.area_score, Self::AREA_MAX),
        ] {
            if value > max {
                return Err(Error::validation(
                    field,
                    format!("{value} outside ordinal range 0..={max}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionalPasi {
    pub region: Region,
    pub value: f64,
}

impl RegionalPasi {
    pub fn new(region: Region, value: f64) -> Result<Self> {
        check_pasi_range("regional PASI", value)?;
        Ok(RegionalPasi { region, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsolutePasi {
    pub value: f64,
}

fn check_pasi_range(field: &str, value: f64) -> Result<()> {
    if !(0.0..=PASI_MAX).contains(&value) {
        return Err(Error::validation(
            field,
            format!("{value} outside [0, {PASI_MAX}]"),
        ));
    }
    Ok(())
}

/// `(erythema + induration + desquamation) * area_score`, computed in integers.
pub fn regional_pasi(components: &SeverityComponents, region: Region) -> Result<RegionalPasi> {
    components.validate()?;
    let severity = u32::from(components.erythema)
        + u32::from(components.induration)
        + u32::from(components.desquamation);
    let value = severity * u32::from(components.area_score);
    Ok(RegionalPasi {
        region,
        value: f64::from(value),
    })
}

/// Region-weighted sum of the four regional scores.
///
/// Requires exactly one entry per region.
pub fn total_pasi(regional: &[RegionalPasi]) -> Result<AbsolutePasi> {
    let mut seen: [Option<f64>; 4] = [None; 4];
    for r in regional {
        check_pasi_range(r.region.code(), r.value)?;
        let slot = &mut seen[r.region.index()];
        if slot.is_some() {
            return Err(Error::Structure(format!(
                "duplicate regional score for {}",
                r.region
            )));
        }
        *slot = Some(r.value);
    }
    let mut weighted = 0.0;
    for region in Region::ALL {
        let value = seen[region.index()]
            .ok_or_else(|| Error::Structure(format!("missing regional score for {region}")))?;
        weighted += f64::from(region.weight_tenths()) * value;
    }
    Ok(AbsolutePasi {
        value: weighted / 10.0,
    })
}

/// Convenience wrapper over [`total_pasi`] for a complete per-region table.
pub fn total_from_regions(values: &PerRegion<f64>) -> Result<AbsolutePasi> {
    let regional: Vec<RegionalPasi> = values
        .iter()
        .map(|(region, &value)| RegionalPasi { region, value })
        .collect();
    total_pasi(&regional)
}

/// Clinical area binning: 0%, <10%, 10-29%, 30-49%, 50-69%, 70-89%, >=90%.
pub fn area_fraction_to_score(fraction: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation(
            "area fraction",
            format!("{fraction} outside [0, 1]"),
        ));
    }
    let score = if fraction == 0.0 {
        0
    } else if fraction < 0.10 {
        1
    } else if fraction < 0.30 {
        2
    } else if fraction < 0.50 {
        3
    } else if fraction < 0.70 {
        4
    } else if fraction < 0.90 {
        5
    } else {
        6
    };
    Ok(score)
}
