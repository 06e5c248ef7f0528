//! A copy task with a known answer key, used for desk-scale experiments.
//!
//! Tokens come from a 32-letter alphabet: 16 lowercase letters and their
//! uppercase twins. A token's *content* is its letter and its *style* is its
//! case. The prompt is a lowercase string; a good response copies its
//! content in any case. The rejected response carries independently drawn
//! case and a controlled number of content substitutions, so the pair
//! differs both in what matters and in what does not.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridging::RuleOracle;
use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::vocab::{TokenSeq, Vocabulary};

pub const ALPHABET: &[u8; 32] = b"abcdefghijklmnopABCDEFGHIJKLMNOP";
pub const CONTENT_CLASSES: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopyTask {
    pub min_len: usize,
    pub max_len: usize,
    /// Content substitutions in the rejected response, drawn uniformly from
    /// `min_corruptions..=max_corruptions` (capped at the length).
    pub min_corruptions: usize,
    pub max_corruptions: usize,
    /// Per-token probability that a response token is uppercase.
    pub style_noise: f64,
}

impl Default for CopyTask {
    fn default() -> Self {
        CopyTask {
            min_len: 8,
            max_len: 8,
            min_corruptions: 1,
            max_corruptions: 3,
            style_noise: 0.5,
        }
    }
}

impl CopyTask {
    pub fn vocabulary() -> Vocabulary {
        Vocabulary::from_alphabet(ALPHABET).expect("alphabet has distinct bytes")
    }

    pub fn oracle() -> RuleOracle {
        RuleOracle::with_content_classes(CONTENT_CLASSES)
    }

    /// A small transformer whose context fits prompt plus response.
    pub fn architecture(&self) -> Architecture {
        Architecture::Transformer {
            vocab: ALPHABET.len(),
            context: 2 * self.max_len,
            width: 16,
            layers: 1,
            heads: 2,
            hidden: 32,
            zero_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig("need 0 < min_len <= max_len".into()));
        }
        if self.min_corruptions == 0 || self.min_corruptions > self.max_corruptions {
            return Err(Error::InvalidConfig(
                "need 0 < min_corruptions <= max_corruptions".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.style_noise) {
            return Err(Error::InvalidConfig("style_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn generate(&self, pairs: usize, seed: u64) -> Result<Vec<PreferenceRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..pairs).map(|i| self.sample(&mut rng, i)).collect())
    }

    fn styled(&self, rng: &mut ChaCha8Rng, content: u32) -> u32 {
        if rng.gen_bool(self.style_noise) {
            content + CONTENT_CLASSES
        } else {
            content
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, i: usize) -> PreferenceRecord {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let prompt: Vec<u32> = (0..len).map(|_| rng.gen_range(0..CONTENT_CLASSES)).collect();
        let chosen: Vec<u32> = prompt.iter().map(|&c| self.styled(rng, c)).collect();
        let mut rejected: Vec<u32> = prompt.iter().map(|&c| self.styled(rng, c)).collect();
        let d = rng.gen_range(self.min_corruptions..=self.max_corruptions).min(len);
        for pos in sample(rng, len, d) {
            let shift = rng.gen_range(1..CONTENT_CLASSES);
            let content = (prompt[pos] + shift) % CONTENT_CLASSES;
            rejected[pos] = self.styled(rng, content);
        }
        let mut r = PreferenceRecord::new(TokenSeq::from(prompt), chosen.into(), rejected.into());
        r.source_id = Some(format!("copy-{i}"));
        r
    }
}

/// Number of response positions whose content differs from the prompt.
pub fn content_errors(prompt: &[u32], response: &[u32]) -> usize {
    let diff: usize = prompt
        .iter()
        .zip(response)
        .filter(|(&p, &r)| p % CONTENT_CLASSES != r % CONTENT_CLASSES)
        .count();
    diff + prompt.len().abs_diff(response.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridging::bridge_dataset;
    use crate::data::DistanceBasis;

    #[test]
    fn pairs_have_the_requested_corruptions() {
        let task = CopyTask {
            min_corruptions: 2,
            max_corruptions: 2,
            ..CopyTask::default()
        };
        let recs = task.generate(200, 1).unwrap();
        for r in &recs {
            assert_eq!(content_errors(&r.prompt, &r.chosen), 0);
            assert_eq!(content_errors(&r.prompt, &r.rejected), 2);
            assert!(r.prompt.iter().all(|&t| t < CONTENT_CLASSES));
            assert!(r.chosen.len() <= task.max_len);
        }
        assert_eq!(recs, task.generate(200, 1).unwrap());
        assert_ne!(recs, task.generate(200, 2).unwrap());
    }

    #[test]
    fn bridging_fixes_content_and_shrinks_distance() {
        let task = CopyTask::default();
        let recs = task.generate(100, 4).unwrap();
        let (bridged, report) = bridge_dataset(&recs, &CopyTask::oracle(), 1.0, 0).unwrap();
        assert_eq!(report.modified, 100);
        for r in &bridged {
            let pseudo = r.pseudo_chosen.as_ref().unwrap();
            assert_eq!(content_errors(&r.prompt, pseudo), 0);
            assert!(r.distance(DistanceBasis::Effective) <= r.distance(DistanceBasis::Original));
        }
        assert!(report.mean_distance_after < report.mean_distance_before);
    }

    #[test]
    fn text_view_is_readable() {
        let v = CopyTask::vocabulary();
        assert_eq!(v.size(), 32);
        assert_eq!(v.decode(&[0, 17, 15]).unwrap(), b"aBp");
    }
}
