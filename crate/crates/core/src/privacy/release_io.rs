//! JSON document for [`NoisyRelease`].

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::{sensitivity_for, NoisyRelease, PrivacyParams};
use crate::error::{Error, Result};
use crate::sstats::{layout, Block, Model};

/// A real written with 17 significant digits so it round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real17(pub f64);

impl fmt::Display for Real17 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.16e}", self.0)
    }
}

impl Serialize for Real17 {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return serializer.serialize_none();
        }
        let raw = serde_json::value::RawValue::from_string(self.to_string())
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Real17 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Option::<f64>::deserialize(deserializer).map(|v| Real17(v.unwrap_or(f64::NAN)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryDoc {
    pub exponents: Vec<u32>,
    pub y_power: u32,
    pub multiplier: Real17,
    pub value: Real17,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDoc {
    pub label: Block,
    pub sigma: Real17,
    pub entries: Vec<EntryDoc>,
}

/// Serialized form of a release.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReleaseDocument {
    pub model: Model,
    pub d: usize,
    pub m: u32,
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: Real17,
    pub delta: Real17,
    #[serde(rename = "R_x")]
    pub r_x: Real17,
    #[serde(rename = "R_y")]
    pub r_y: Real17,
    pub sensitivity: Real17,
    pub blocks: Vec<BlockDoc>,
    pub seed: u64,
}

impl ReleaseDocument {
    pub fn from_release(r: &NoisyRelease) -> Self {
        let blocks = r
            .layout
            .blocks
            .iter()
            .map(|&b| BlockDoc {
                label: b,
                sigma: Real17(r.params.sigma_blocks[&b]),
                entries: r
                    .layout
                    .block_range(b)
                    .into_iter()
                    .map(|i| {
                        let e = &r.layout.entries[i];
                        EntryDoc {
                            exponents: e.index.exponents().to_vec(),
                            y_power: e.y_power,
                            multiplier: Real17(e.multiplier),
                            value: Real17(r.z[i]),
                        }
                    })
                    .collect(),
            })
            .collect();
        ReleaseDocument {
            model: r.layout.model,
            d: r.layout.d,
            m: r.layout.m,
            n: r.n_records,
            epsilon: Real17(r.params.epsilon),
            delta: Real17(r.params.delta),
            r_x: Real17(r.params.r_x),
            r_y: Real17(r.params.r_y),
            sensitivity: Real17(r.sensitivity),
            blocks,
            seed: r.seed,
        }
    }

    /// Rebuilds the release, checking the document against the canonical
    /// layout for its model, dimension and order.
    pub fn into_release(self) -> Result<NoisyRelease> {
        let lay = layout(self.model, self.d, self.m)?;
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        let labels: Vec<Block> = self.blocks.iter().map(|b| b.label).collect();
        if labels != lay.blocks {
            return Err(Error::BlockMismatch(format!(
                "expected blocks {:?}, found {:?}",
                lay.blocks, labels
            )));
        }
        let mut z = Vec::with_capacity(lay.len());
        let mut sigma_blocks = BTreeMap::new();
        for block in &self.blocks {
            sigma_blocks.insert(block.label, block.sigma.0);
            let positions = lay.block_range(block.label);
            if positions.len() != block.entries.len() {
                return Err(Error::BlockMismatch(format!(
                    "block {} has {} entries, layout expects {}",
                    block.label,
                    block.entries.len(),
                    positions.len()
                )));
            }
            for (&i, e) in positions.iter().zip(&block.entries) {
                let want = &lay.entries[i];
                if want.index.exponents() != e.exponents.as_slice() || want.y_power != e.y_power {
                    return Err(Error::InvalidData(format!(
                        "entry {i} is {:?} with y power {}, layout expects {:?} with y power {}",
                        e.exponents,
                        e.y_power,
                        want.index.exponents(),
                        want.y_power
                    )));
                }
                if (want.multiplier - e.multiplier.0).abs() > 1e-12 * want.multiplier {
                    return Err(Error::InvalidData(format!(
                        "entry {i} multiplier {} differs from {}",
                        e.multiplier.0, want.multiplier
                    )));
                }
                if !e.value.0.is_finite() {
                    return Err(Error::InvalidData(format!("entry {i} value is not finite")));
                }
                z.push(e.value.0);
            }
        }
        let params = PrivacyParams {
            epsilon: self.epsilon.0,
            delta: self.delta.0,
            r_x: self.r_x.0,
            r_y: self.r_y.0,
            sigma_blocks,
        };
        params.validate(&lay)?;
        let sensitivity = sensitivity_for(&lay, &params)?;
        let noise_sd = lay
            .entries
            .iter()
            .map(|e| params.sigma_blocks[&e.block])
            .collect();
        Ok(NoisyRelease {
            z,
            layout: lay,
            n_records: self.n,
            noise_sd,
            sensitivity,
            params,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::release;

    #[test]
    fn real17_formats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, 123456.789] {
            let s = serde_json::to_string(&Real17(v)).unwrap();
            let back: Real17 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn release_json_round_trip() {
        let lay = layout(Model::Poisson, 3, 2).unwrap();
        let s: Vec<f64> = (0..lay.len()).map(|i| i as f64 * 0.37 - 1.0).collect();
        let p = PrivacyParams::calibrated(&lay, 0.9, 1e-5, 1.0, 5.0, None).unwrap();
        let r = release(&s, &lay, 321, &p, 99).unwrap();
        let text = r.to_json().unwrap();
        let back = NoisyRelease::from_json(&text).unwrap();
        assert_eq!(back, r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["N"], 321);
        assert_eq!(v["blocks"][2]["label"], "y_t1");
        assert_eq!(v["blocks"][1]["entries"][3]["exponents"], serde_json::json!([1, 1, 0]));
    }

    #[test]
    fn tampered_layout_is_rejected() {
        let lay = layout(Model::Logistic, 2, 2).unwrap();
        let p = PrivacyParams::calibrated(&lay, 1.0, 1e-5, 1.0, 0.0, None).unwrap();
        let r = release(&[0.0; 5], &lay, 10, &p, 1).unwrap();
        let mut doc = ReleaseDocument::from_release(&r);
        doc.blocks.swap(0, 1);
        assert!(matches!(doc.into_release(), Err(Error::BlockMismatch(_))));
        let mut doc = ReleaseDocument::from_release(&r);
        doc.blocks[1].entries[0].exponents = vec![1, 1];
        assert!(doc.into_release().is_err());
    }
}
