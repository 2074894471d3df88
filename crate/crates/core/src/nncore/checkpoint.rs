use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamSet, ParamStore};
use crate::error::{Error, Result};
use crate::Rng;

pub const CHECKPOINT_FORMAT: &str = "bsmpc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing parameter container: named optimizer-backed stores,
/// plain parameter sets (no optimizer state), counters, RNG state and
/// free-form string metadata. Serialized as JSON; floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stores: BTreeMap<String, ParamStore>,
    pub sets: BTreeMap<String, ParamSet>,
    pub counters: BTreeMap<String, u64>,
    pub rng: Option<Rng>,
    pub meta: BTreeMap<String, String>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            stores: BTreeMap::new(),
            sets: BTreeMap::new(),
            counters: BTreeMap::new(),
            rng: None,
            meta: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::DenseArray;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn roundtrip_is_lossless() {
        let mut set = ParamSet::new();
        set.insert("a", DenseArray::new(vec![2, 2], vec![0.1, 1.0 / 3.0, -2e-308, 7.5e300]).unwrap());
        let mut store = ParamStore::new(set.clone());
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), DenseArray::new(vec![2, 2], vec![0.3, -0.2, 1e-9, 4.0]).unwrap());
        store.adam_step(&g, 1e-3).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        rng.next_u64();

        let mut ck = Checkpoint::default();
        ck.stores.insert("theta".into(), store);
        ck.sets.insert("target".into(), set);
        ck.counters.insert("env_step".into(), 42);
        ck.rng = Some(rng.clone());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut r2 = back.rng.unwrap();
        assert_eq!(r2.next_u64(), rng.next_u64());
    }

    #[test]
    fn rejects_foreign_format() {
        let mut ck = Checkpoint::default();
        ck.format = "other".into();
        let s = serde_json::to_string(&ck).unwrap();
        assert!(Checkpoint::from_json(&s).is_err());
    }
}
