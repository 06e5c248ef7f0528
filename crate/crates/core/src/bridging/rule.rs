//! Deterministic modifier for synthetic tasks.
//!
//! Tokens are read as `style · m + content` where `m` is the number of content
//! classes. Only content carries preference: the oracle rewrites content and
//! leaves the style of the response it edits alone, which is what makes a
//! pseudo-winning response closer to the losing one than the original winner
//! was. With `m` equal to the vocabulary size every token is pure content and
//! the oracle simply reproduces the reference.

use super::{alignment, BackendError, EditOp, ModificationOutcome, ModifierBackend, ModifyRequest, ModifyTask};
use crate::vocab::TokenSeq;

#[derive(Clone, Debug)]
pub struct RuleOracle {
    content_classes: u32,
}

impl RuleOracle {
    /// Every token is its own content class.
    pub fn exact(vocab: usize) -> Self {
        RuleOracle {
            content_classes: vocab as u32,
        }
    }

    pub fn with_content_classes(content_classes: u32) -> Self {
        assert!(content_classes > 0, "at least one content class");
        RuleOracle { content_classes }
    }

    pub fn content_classes(&self) -> u32 {
        self.content_classes
    }

    fn content(&self, t: u32) -> u32 {
        t % self.content_classes
    }

    fn with_content(&self, t: u32, content: u32) -> u32 {
        t - self.content(t) + content
    }

    /// `base` with its content rewritten to match `reference`: aligned
    /// positions keep the base style, surplus base tokens are dropped and
    /// missing ones are copied from the reference.
    pub fn transplant(&self, base: &[u32], reference: &[u32]) -> Vec<u32> {
        let kb: Vec<u32> = base.iter().map(|&t| self.content(t)).collect();
        let kr: Vec<u32> = reference.iter().map(|&t| self.content(t)).collect();
        let mut out = Vec::with_capacity(reference.len());
        for op in alignment(&kb, &kr) {
            match op {
                EditOp::Match(i, _) => out.push(base[i]),
                EditOp::Substitute(i, j) => out.push(self.with_content(base[i], kr[j])),
                EditOp::Delete(_) => {}
                EditOp::Insert(j) => out.push(reference[j]),
            }
        }
        out
    }

    /// Shifts the content of one position chosen from the sequence itself.
    pub fn corrupt(&self, seq: &[u32]) -> Vec<u32> {
        let mut out = seq.to_vec();
        if seq.is_empty() || self.content_classes < 2 {
            return out;
        }
        let site = (seq.iter().map(|&t| t as usize).sum::<usize>()) % seq.len();
        let c = self.content(seq[site]);
        out[site] = self.with_content(seq[site], (c + 1) % self.content_classes);
        out
    }
}

impl ModifierBackend for RuleOracle {
    fn id(&self) -> &str {
        "rule-oracle"
    }

    fn modify(&self, req: &ModifyRequest<'_>) -> Result<ModificationOutcome, BackendError> {
        let (base, result) = match req.task {
            ModifyTask::Improve => (req.rejected, self.transplant(req.rejected, req.chosen)),
            ModifyTask::DegradeWithReference => {
                (req.chosen, self.transplant(req.chosen, req.rejected))
            }
            ModifyTask::DegradeBlind => (req.chosen, self.corrupt(req.chosen)),
            // The synthetic task copies the prompt, so its content is the
            // answer key when no reference response is available.
            ModifyTask::ImproveBlind => (req.rejected, self.transplant(req.rejected, req.prompt)),
        };
        let edits = super::edit_distance(base, &result);
        if result == base {
            return Ok(ModificationOutcome::filtered(self.id(), "unchanged".into()));
        }
        Ok(ModificationOutcome {
            pseudo: Some(TokenSeq::new(result)),
            keep: true,
            backend_id: self.id().to_string(),
            raw_reply: format!("{edits} edit(s)"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridging::{edit_distance, targeted_modify};

    #[test]
    fn one_token_error_is_corrected() {
        let oracle = RuleOracle::exact(8);
        let y_w = [1, 2, 3, 4];
        let y_l = [1, 2, 7, 4];
        let out = targeted_modify(&oracle, &[5], &y_w, &y_l).unwrap();
        assert!(out.keep);
        assert_eq!(out.pseudo.unwrap().as_slice(), &[1, 2, 3, 4]);
    }

    #[test]
    fn identical_pair_is_filtered() {
        let oracle = RuleOracle::exact(8);
        let out = targeted_modify(&oracle, &[5], &[1, 2], &[1, 2]).unwrap();
        assert!(!out.keep);
        assert!(out.pseudo.is_none());
    }

    #[test]
    fn style_of_losing_response_survives() {
        // m = 4: token = 4·style + content
        let oracle = RuleOracle::with_content_classes(4);
        let y_w = [0, 5, 2, 7]; // contents 0 1 2 3, styles 0 1 0 1
        let y_l = [4, 1, 5, 3]; // contents 0 1 1 3, styles 1 0 1 0
        let pseudo = oracle.transplant(&y_l, &y_w);
        assert_eq!(pseudo, vec![4, 1, 6, 3]);
        assert_eq!(edit_distance(&pseudo, &y_l), 1);
        assert!(edit_distance(&y_w, &y_l) > 1);
    }

    #[test]
    fn degrade_with_reference_hits_the_corruption_site() {
        let oracle = RuleOracle::exact(8);
        let y_w = [1, 2, 3, 4, 5];
        let y_l = [1, 2, 6, 4, 5];
        let out = oracle
            .modify(&ModifyRequest {
                task: ModifyTask::DegradeWithReference,
                prompt: &[1],
                chosen: &y_w,
                rejected: &y_l,
            })
            .unwrap();
        let pseudo = out.pseudo.unwrap();
        let differing: Vec<usize> = (0..5).filter(|&i| pseudo[i] != y_w[i]).collect();
        assert_eq!(differing, vec![2]);
    }

    #[test]
    fn blind_corruption_changes_one_token() {
        let oracle = RuleOracle::with_content_classes(4);
        let y = [0, 1, 2, 3, 4];
        let c = oracle.corrupt(&y);
        assert_eq!(edit_distance(&c, &y), 1);
    }
}
