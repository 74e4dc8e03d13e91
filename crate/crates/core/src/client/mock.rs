//! Deterministic test-double backend driven by stored ground truth.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClientError, InferenceBackend, InferenceReply, InferenceRequest};
use crate::labels::{emit_prediction, BehaviorLabel, PredictionGrid};
use crate::room::RoomType;
use crate::scenario::{default_rules, room_template};
use crate::store::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Ground truth, verbatim.
    Oracle,
    /// Ground truth with per-slot token replacement and cosmetic formatting noise.
    NoisyOracle,
    /// Per-slot token replacement plus within-row reordering.
    Scrambler,
    /// A constant reply.
    FixedText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub mode: MockMode,
    #[serde(default)]
    pub verb_corruption: f64,
    #[serde(default)]
    pub noun_corruption: f64,
    /// Probability that a row is shuffled (scrambler only).
    #[serde(default)]
    pub order_shuffle: f64,
    /// Probability of cosmetic wrapping around the reply (noisy oracle only).
    #[serde(default)]
    pub format_noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fixed_text: String,
}

impl MockModelSpec {
    pub fn new(mode: MockMode) -> Self {
        Self {
            mode,
            verb_corruption: 0.0,
            noun_corruption: 0.0,
            order_shuffle: 0.0,
            format_noise: 0.0,
            seed: 0,
            fixed_text: String::new(),
        }
    }

    pub fn oracle() -> Self {
        Self::new(MockMode::Oracle)
    }

    pub fn noisy_oracle(verb: f64, noun: f64, seed: u64) -> Self {
        Self {
            verb_corruption: verb,
            noun_corruption: noun,
            seed,
            ..Self::new(MockMode::NoisyOracle)
        }
    }

    pub fn scrambler(verb: f64, noun: f64, shuffle: f64, seed: u64) -> Self {
        Self {
            verb_corruption: verb,
            noun_corruption: noun,
            order_shuffle: shuffle,
            seed,
            ..Self::new(MockMode::Scrambler)
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        for (name, p) in [
            ("verb_corruption", self.verb_corruption),
            ("noun_corruption", self.noun_corruption),
            ("order_shuffle", self.order_shuffle),
            ("format_noise", self.format_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ClientError::InvalidRequest(format!("{name}={p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Replacement tokens for corrupted slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockVocab {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
}

impl Default for MockVocab {
    /// Rule verbs and every object name of the built-in rooms.
    fn default() -> Self {
        let verbs: BTreeSet<String> = default_rules().into_iter().map(|r| r.verb).collect();
        let nouns: BTreeSet<String> = RoomType::ALL
            .iter()
            .flat_map(|r| room_template(*r).into_parts().1.into_keys())
            .collect();
        Self {
            verbs: verbs.into_iter().collect(),
            nouns: nouns.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockModelSpec,
    truths: BTreeMap<String, PredictionGrid>,
    vocab: MockVocab,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn replace(token: &str, pool: &[String], rng: &mut ChaCha8Rng) -> String {
    let others: Vec<&String> = pool.iter().filter(|t| t.as_str() != token).collect();
    others.choose(rng).map_or_else(|| token.to_string(), |t| (*t).clone())
}

impl MockModel {
    pub fn new(spec: MockModelSpec, truths: BTreeMap<String, PredictionGrid>, vocab: MockVocab) -> Result<Self, ClientError> {
        spec.validate()?;
        Ok(Self { spec, truths, vocab })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    fn rng(&self, req: &InferenceRequest, tag: &str) -> ChaCha8Rng {
        let seed = self.spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ req.seed.unwrap_or(0).rotate_left(29)
            ^ fnv1a(tag);
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn corrupt(&self, gt: &PredictionGrid, rng: &mut ChaCha8Rng, shuffle: bool) -> PredictionGrid {
        let rows = gt
            .rows()
            .iter()
            .map(|row| {
                let mut row: Vec<BehaviorLabel> = row
                    .iter()
                    .map(|l| {
                        let verb = if rng.random_bool(self.spec.verb_corruption) {
                            replace(l.verb(), &self.vocab.verbs, rng)
                        } else {
                            l.verb().to_string()
                        };
                        let noun = if rng.random_bool(self.spec.noun_corruption) {
                            replace(l.noun(), &self.vocab.nouns, rng)
                        } else {
                            l.noun().to_string()
                        };
                        BehaviorLabel::new(l.h_id(), &verb, &noun).expect("vocabulary tokens are valid")
                    })
                    .collect();
                if shuffle && rng.random_bool(self.spec.order_shuffle) {
                    row.shuffle(rng);
                }
                row
            })
            .collect();
        PredictionGrid::new(rows, gt.horizon()).expect("corruption keeps grid shape")
    }

    fn decorate(&self, text: String, rng: &mut ChaCha8Rng) -> String {
        if !rng.random_bool(self.spec.format_noise) {
            return text;
        }
        match rng.random_range(0..3) {
            0 => format!("```python\n{text}\n```"),
            1 => format!("Prediction:\n{text}"),
            _ => format!("{text}\n"),
        }
    }
}

impl InferenceBackend for MockModel {
    fn infer(&self, req: &InferenceRequest) -> Result<InferenceReply, ClientError> {
        if self.spec.mode == MockMode::FixedText {
            return Ok(reply(self.spec.fixed_text.clone()));
        }
        let tag = req
            .tag
            .as_deref()
            .ok_or_else(|| ClientError::InvalidRequest("mock backend needs a sample tag".into()))?;
        let gt = self
            .truths
            .get(tag)
            .ok_or_else(|| ClientError::InvalidRequest(format!("no ground truth for {tag}")))?;
        let mut rng = self.rng(req, tag);
        let text = match self.spec.mode {
            MockMode::Oracle => emit_prediction(gt),
            MockMode::NoisyOracle => {
                let text = emit_prediction(&self.corrupt(gt, &mut rng, false));
                self.decorate(text, &mut rng)
            }
            MockMode::Scrambler => emit_prediction(&self.corrupt(gt, &mut rng, true)),
            MockMode::FixedText => unreachable!(),
        };
        Ok(reply(text))
    }
}

fn reply(text: String) -> InferenceReply {
    InferenceReply {
        text,
        usage: Usage::default(),
        latency_ms: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::parse_prediction;
    use crate::prompt::Prompt;

    fn gt() -> PredictionGrid {
        let rows = (0..2u32)
            .map(|h| {
                ["grab", "walk", "open", "put", "sit", "read"]
                    .iter()
                    .zip(["cup", "sofa", "fridge", "cup", "chair", "book"])
                    .map(|(v, n)| BehaviorLabel::new(h, v, n).unwrap())
                    .collect()
            })
            .collect();
        PredictionGrid::new(rows, 6).unwrap()
    }

    fn model(spec: MockModelSpec) -> MockModel {
        MockModel::new(spec, BTreeMap::from([("s".to_string(), gt())]), MockVocab::default()).unwrap()
    }

    fn req(seed: u64) -> InferenceRequest {
        let p = Prompt {
            system: String::new(),
            parts: vec![],
        };
        InferenceRequest::new(p, "mock").with_seed(seed).with_tag("s")
    }

    #[test]
    fn oracle_is_verbatim() {
        assert_eq!(model(MockModelSpec::oracle()).infer(&req(0)).unwrap().text, emit_prediction(&gt()));
    }

    #[test]
    fn full_verb_corruption() {
        let m = model(MockModelSpec::noisy_oracle(1.0, 0.0, 9));
        let a = m.infer(&req(1)).unwrap().text;
        assert_eq!(a, m.infer(&req(1)).unwrap().text);
        let parsed = parse_prediction(&a, 6).unwrap().grid;
        for (prow, grow) in parsed.rows().iter().zip(gt().rows()) {
            for (p, g) in prow.iter().zip(grow) {
                assert_ne!(p.verb(), g.verb());
                assert_eq!(p.noun(), g.noun());
            }
        }
    }

    #[test]
    fn format_noise_still_parses() {
        let mut spec = MockModelSpec::noisy_oracle(0.0, 0.0, 3);
        spec.format_noise = 1.0;
        let m = model(spec);
        for seed in 0..20 {
            let text = m.infer(&req(seed)).unwrap().text;
            assert_eq!(parse_prediction(&text, 6).unwrap().grid, gt(), "{text}");
        }
    }

    #[test]
    fn scrambler_seeds_vary() {
        let m = model(MockModelSpec::scrambler(0.3, 0.5, 0.5, 4));
        let texts: BTreeSet<_> = (0..8).map(|s| m.infer(&req(s)).unwrap().text).collect();
        assert_eq!(texts.len(), 8);
    }

    #[test]
    fn rejects_bad_probability() {
        let spec = MockModelSpec::noisy_oracle(1.5, 0.0, 0);
        assert!(MockModel::new(spec, BTreeMap::new(), MockVocab::default()).is_err());
    }

    #[test]
    fn untagged_request_rejected() {
        let mut r = req(0);
        r.tag = None;
        assert!(matches!(model(MockModelSpec::oracle()).infer(&r), Err(ClientError::InvalidRequest(_))));
    }
}
