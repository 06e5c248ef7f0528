use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomically;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Euclidean norm of the batch gradient before clipping.
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub kl_to_reference: f64,
    pub reward_accuracy: f64,
    pub reward_margin: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn mean_grad_norm(&self) -> Option<f64> {
        if self.steps.is_empty() {
            return None;
        }
        Some(self.steps.iter().map(|s| s.grad_norm).sum::<f64>() / self.steps.len() as f64)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// One JSON object per line, in step order, evaluations after the step
    /// they were taken at.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut evals = self.evals.iter().peekable();
        let emit = |out: &mut W, line: &Line| -> Result<()> {
            serde_json::to_writer(&mut *out, line)
                .map_err(|e| Error::Checkpoint(format!("serializing log: {e}")))?;
            out.write_all(b"\n").map_err(|e| Error::io("<log>", e))
        };
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step < s.step) {
                emit(&mut out, &Line::Eval(e.clone()))?;
            }
            emit(&mut out, &Line::Step(s.clone()))?;
            while let Some(e) = evals.next_if(|e| e.step == s.step) {
                emit(&mut out, &Line::Eval(e.clone()))?;
            }
        }
        for e in evals {
            emit(&mut out, &Line::Eval(e.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io("<log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                Line::Step(s) => log.steps.push(s),
                Line::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomically(path.as_ref(), |w| self.write_jsonl(w))
    }
}
