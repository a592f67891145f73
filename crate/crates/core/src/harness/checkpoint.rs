//! Binary checkpoints.
//!
//! Layout: `u32` LE header length, UTF-8 JSON header, then `f32` LE sections
//! each preceded by a `u64` LE element count, in the order codebook, params,
//! reference params, Adam first moment, Adam second moment. The last three
//! are present only when the header says so.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{AdamState, TrainState};
use crate::msvq::{Codebook, CodebookKind, ScaleSchedule};
use crate::policy::{Policy, PolicyConfig, PolicyParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub stage: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    policy_config: PolicyConfig,
    schedule: ScaleSchedule,
    vocab: usize,
    codebook_kind: CodebookKind,
    codebook_seed: u64,
    seed_lineage: Vec<SeedRecord>,
    iteration: usize,
    has_reference: bool,
    has_optimizer_state: bool,
    adam_step: u64,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy_config: PolicyConfig,
    pub codebook: Codebook,
    pub params: PolicyParams,
    /// Frozen anchor of a GRPO run; absent for pretrained weights.
    pub params_ref: Option<PolicyParams>,
    pub adam: Option<AdamState>,
    pub iteration: usize,
    pub seed_lineage: Vec<SeedRecord>,
}

fn put_section(out: &mut Vec<u8>, values: &[f32]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn section(&mut self, what: &str, expected: usize) -> Result<Vec<f32>> {
        let n = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        if n != expected as u64 {
            return Err(Error::Checkpoint(format!("{what} has {n} values, expected {expected}")));
        }
        let raw = self.take(expected * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn pretrained(policy: &Policy, params: PolicyParams, seed_lineage: Vec<SeedRecord>) -> Self {
        Checkpoint {
            policy_config: policy.config().clone(),
            codebook: policy.codebook().clone(),
            params,
            params_ref: None,
            adam: None,
            iteration: 0,
            seed_lineage,
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        Policy::new(self.policy_config.clone(), self.codebook.clone())
    }

    /// GRPO state: resumed when the checkpoint carries a reference and
    /// optimiser moments, fresh otherwise.
    pub fn train_state(&self) -> Result<TrainState> {
        match (&self.params_ref, &self.adam) {
            (Some(r), Some(a)) => TrainState::resume(self.params.clone(), r.clone(), self.iteration, a.clone()),
            _ => Ok(TrainState::from_pretrained(self.params.clone())),
        }
    }

    pub fn with_state(&self, state: &TrainState) -> Self {
        Checkpoint {
            params: state.params.clone(),
            params_ref: Some(state.params_ref().clone()),
            adam: Some(state.adam.clone()),
            iteration: state.iteration,
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            policy_config: self.policy_config.clone(),
            schedule: self.policy_config.schedule.clone(),
            vocab: self.policy_config.vocab,
            codebook_kind: self.codebook.kind(),
            codebook_seed: self.codebook.seed(),
            seed_lineage: self.seed_lineage.clone(),
            iteration: self.iteration,
            has_reference: self.params_ref.is_some(),
            has_optimizer_state: self.adam.is_some(),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(json.len() + 4 + 8 * 5 + 4 * self.params.len() * 4);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        put_section(&mut out, self.codebook.entries());
        put_section(&mut out, self.params.values());
        if let Some(r) = &self.params_ref {
            put_section(&mut out, r.values());
        }
        if let Some(a) = &self.adam {
            put_section(&mut out, &a.m);
            put_section(&mut out, &a.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
        let raw = r.take(len, "header")?;
        let probe: VersionProbe =
            serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(probe.format_version));
        }
        let h: Header = serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if h.schedule != h.policy_config.schedule || h.vocab != h.policy_config.vocab {
            return Err(Error::Checkpoint("header schedule or vocab disagrees with policy_config".into()));
        }
        h.policy_config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("policy_config: {e}")))?;
        let dim = h.policy_config.latent_dim;
        let entries = r.section("codebook", h.vocab * dim)?;
        let codebook = Codebook::from_entries(entries, h.vocab, dim, h.codebook_seed, h.codebook_kind)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let policy = Policy::new(h.policy_config.clone(), codebook.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = policy.param_count();
        let params = PolicyParams::from_values(r.section("params", n)?);
        let params_ref = if h.has_reference {
            Some(PolicyParams::from_values(r.section("params_ref", n)?))
        } else {
            None
        };
        let adam = if h.has_optimizer_state {
            Some(AdamState {
                m: r.section("adam_m", n)?,
                v: r.section("adam_v", n)?,
                step: h.adam_step,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            policy_config: h.policy_config,
            codebook,
            params,
            params_ref,
            adam,
            iteration: h.iteration,
            seed_lineage: h.seed_lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Policy {
        let config = PolicyConfig {
            schedule: ScaleSchedule::square(&[1, 2]).unwrap(),
            vocab: 8,
            latent_dim: 3,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            n_classes: 2,
            label_dropout_p: 0.1,
        };
        Policy::new(config, Codebook::lattice(0, 8, 3).unwrap()).unwrap()
    }

    fn lineage() -> Vec<SeedRecord> {
        vec![SeedRecord {
            stage: "pretrain".into(),
            seed: 7,
        }]
    }

    #[test]
    fn pretrained_round_trip_is_bit_identical() {
        let p = tiny();
        let ck = Checkpoint::pretrained(&p, p.init_params(3), lineage());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + len]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["has_optimizer_state"], false);
        let n = u64::from_le_bytes(bytes[4 + len..12 + len].try_into().unwrap());
        assert_eq!(n, 24);
    }

    #[test]
    fn training_state_round_trips() {
        let p = tiny();
        let ck = Checkpoint::pretrained(&p, p.init_params(3), lineage());
        let mut state = ck.train_state().unwrap();
        state.params.values_mut()[0] += 1.0;
        state.adam.m[1] = 0.5;
        state.adam.v[2] = 0.25;
        state.adam.step = 4;
        state.iteration = 9;
        let trained = ck.with_state(&state);
        let back = Checkpoint::from_bytes(&trained.to_bytes()).unwrap();
        assert_eq!(back, trained);
        let resumed = back.train_state().unwrap();
        assert_eq!(resumed.params, state.params);
        assert_eq!(resumed.params_ref(), &ck.params);
        assert_eq!(resumed.adam, state.adam);
        assert_eq!(resumed.iteration, 9);
    }

    #[test]
    fn unknown_version_and_corruption_are_rejected() {
        let p = tiny();
        let bytes = Checkpoint::pretrained(&p, p.init_params(0), lineage()).to_bytes();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[4..4 + len].to_vec()).unwrap();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        let mut other = (bumped.len() as u32).to_le_bytes().to_vec();
        other.extend_from_slice(bumped.as_bytes());
        other.extend_from_slice(&bytes[4 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&other), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&[1, 0]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_params_round_trip(vals in proptest::collection::vec(any::<u32>(), 1..8), iter in 0usize..1000) {
            let p = tiny();
            let mut params = p.init_params(0);
            let n = params.len();
            for (i, bits) in vals.iter().enumerate() {
                // any bit pattern, NaN payloads included
                params.values_mut()[i * 7 % n] = f32::from_bits(*bits);
            }
            let mut ck = Checkpoint::pretrained(&p, params, lineage());
            ck.iteration = iter;
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
