//! Preference records, their line-delimited JSON wire form, and
//! edit-distance partitioning.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bridging::edit_distance;
use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocabulary};

/// One preference pair plus whatever the bridging phase attached to it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PreferenceRecord {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub pseudo_chosen: Option<TokenSeq>,
    pub pseudo_rejected: Option<TokenSeq>,
    /// Varied positions of [`PreferenceRecord::winner`].
    pub diff_chosen: Option<Vec<usize>>,
    /// Varied positions of [`PreferenceRecord::loser`].
    pub diff_rejected: Option<Vec<usize>>,
    pub filtered: bool,
    pub source_id: Option<String>,
    /// Unknown wire fields, kept verbatim.
    pub extra: Map<String, Value>,
}

impl PreferenceRecord {
    pub fn new(prompt: TokenSeq, chosen: TokenSeq, rejected: TokenSeq) -> Self {
        PreferenceRecord {
            prompt,
            chosen,
            rejected,
            ..Default::default()
        }
    }

    /// The preferred response actually trained on: the pseudo-winning
    /// response when present.
    pub fn winner(&self) -> &TokenSeq {
        self.pseudo_chosen.as_ref().unwrap_or(&self.chosen)
    }

    pub fn loser(&self) -> &TokenSeq {
        self.pseudo_rejected.as_ref().unwrap_or(&self.rejected)
    }

    pub fn diff_sets(&self) -> Option<(&[usize], &[usize])> {
        match (&self.diff_chosen, &self.diff_rejected) {
            (Some(c), Some(r)) => Some((c, r)),
            _ => None,
        }
    }

    pub fn has_diff(&self) -> bool {
        self.diff_sets().is_some()
    }

    /// Edit distance of the pair selected by `basis`.
    pub fn distance(&self, basis: DistanceBasis) -> usize {
        match basis {
            DistanceBasis::Original => edit_distance(&self.chosen, &self.rejected),
            DistanceBasis::Effective => edit_distance(self.winner(), self.loser()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, idx: &Option<Vec<usize>>, len: usize| -> Result<()> {
            let Some(idx) = idx else { return Ok(()) };
            if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
                return Err(Error::InvalidDiff(format!(
                    "{name} index {bad} out of range for length {len}"
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidDiff(format!("{name} must be strictly increasing")));
            }
            Ok(())
        };
        check("diff_chosen", &self.diff_chosen, self.winner().len())?;
        check("diff_rejected", &self.diff_rejected, self.loser().len())?;
        if self.diff_chosen.is_some() != self.diff_rejected.is_some() {
            return Err(Error::InvalidDiff(
                "diff_chosen and diff_rejected must be present together".into(),
            ));
        }
        Ok(())
    }
}

/// Which pair an edit distance is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBasis {
    /// `(chosen, rejected)` as collected.
    Original,
    /// `(winner, loser)`, i.e. after any bridging.
    #[default]
    Effective,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    prompt: String,
    chosen: String,
    rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_rejected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diff_chosen: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diff_rejected: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    filtered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn to_text(vocab: &Vocabulary, tokens: &[u32]) -> Result<String> {
    String::from_utf8(vocab.decode(tokens)?)
        .map_err(|_| Error::InvalidConfig("record text is not valid UTF-8".into()))
}

fn from_wire(w: WireRecord, vocab: &Vocabulary) -> Result<PreferenceRecord> {
    let enc = |s: &str| vocab.encode(s.as_bytes());
    let record = PreferenceRecord {
        prompt: enc(&w.prompt)?,
        chosen: enc(&w.chosen)?,
        rejected: enc(&w.rejected)?,
        pseudo_chosen: w.pseudo_chosen.as_deref().map(enc).transpose()?,
        pseudo_rejected: w.pseudo_rejected.as_deref().map(enc).transpose()?,
        diff_chosen: w.diff_chosen,
        diff_rejected: w.diff_rejected,
        filtered: w.filtered,
        source_id: w.source_id,
        extra: w.extra,
    };
    record.validate()?;
    Ok(record)
}

fn to_wire(r: &PreferenceRecord, vocab: &Vocabulary) -> Result<WireRecord> {
    let text = |t: &TokenSeq| to_text(vocab, t);
    Ok(WireRecord {
        prompt: text(&r.prompt)?,
        chosen: text(&r.chosen)?,
        rejected: text(&r.rejected)?,
        pseudo_chosen: r.pseudo_chosen.as_ref().map(text).transpose()?,
        pseudo_rejected: r.pseudo_rejected.as_ref().map(text).transpose()?,
        diff_chosen: r.diff_chosen.clone(),
        diff_rejected: r.diff_rejected.clone(),
        filtered: r.filtered,
        source_id: r.source_id.clone(),
        extra: r.extra.clone(),
    })
}

/// Parses line-delimited records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_records<R: Read>(reader: R, vocab: &Vocabulary) -> Result<Vec<PreferenceRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = from_wire(wire, vocab).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<W: Write>(
    mut writer: W,
    records: &[PreferenceRecord],
    vocab: &Vocabulary,
) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(&to_wire(r, vocab)?)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<PreferenceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, vocab)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a half-written dataset.
pub fn save_dataset(
    records: &[PreferenceRecord],
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<()> {
    let path = path.as_ref();
    write_atomically(path, |w| write_records(w, records, vocab))
}

pub(crate) fn write_atomically(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Replaces `path` with `bytes` through a temporary file.
pub fn write_bytes_atomically(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    write_atomically(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))
}

/// Records with `filtered = false`, in order.
pub fn unfiltered(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records.iter().filter(|r| !r.filtered).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl DistanceStats {
    pub fn of(distances: &[usize]) -> Option<Self> {
        let min = *distances.iter().min()?;
        let max = *distances.iter().max()?;
        let mean = distances.iter().sum::<usize>() as f64 / distances.len() as f64;
        Some(DistanceStats { min, mean, max })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    /// 1-based; split 1 holds the smallest distances.
    pub index: usize,
    pub records: Vec<PreferenceRecord>,
    pub distance_stats: DistanceStats,
}

/// Stable sort by effective pair distance, then `k` contiguous near-equal
/// splits (the first `n mod k` splits get one extra record).
pub fn partition_by_distance(records: &[PreferenceRecord], k: usize) -> Result<Vec<DatasetSplit>> {
    partition_by_distance_with(records, k, DistanceBasis::Effective)
}

pub fn partition_by_distance_with(
    records: &[PreferenceRecord],
    k: usize,
    basis: DistanceBasis,
) -> Result<Vec<DatasetSplit>> {
    if k == 0 {
        return Err(Error::InvalidConfig("split count must be at least 1".into()));
    }
    if k > records.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot cut {} records into {k} splits",
            records.len()
        )));
    }
    let mut keyed: Vec<(usize, &PreferenceRecord)> =
        records.iter().map(|r| (r.distance(basis), r)).collect();
    keyed.sort_by_key(|&(d, _)| d);

    let (base, extra) = (records.len() / k, records.len() % k);
    let mut splits = Vec::with_capacity(k);
    let mut rest = keyed.as_slice();
    for index in 0..k {
        let size = base + usize::from(index < extra);
        let (head, tail) = rest.split_at(size);
        rest = tail;
        let distances: Vec<usize> = head.iter().map(|&(d, _)| d).collect();
        splits.push(DatasetSplit {
            index: index + 1,
            records: head.iter().map(|&(_, r)| r.clone()).collect(),
            distance_stats: DistanceStats::of(&distances).expect("split is non-empty"),
        });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::encode;

    fn rec(p: &str, c: &str, r: &str) -> PreferenceRecord {
        PreferenceRecord::new(encode(p.as_bytes()), encode(c.as_bytes()), encode(r.as_bytes()))
    }

    #[test]
    fn reads_three_lines_and_skips_blank() {
        let text = r#"{"prompt":"p","chosen":"a","rejected":"b"}
{"prompt":"p","chosen":"aa","rejected":"b","filtered":true}

{"prompt":"q","chosen":"x","rejected":"y","source_id":"s3","note":{"k":1}}
"#;
        let recs = read_records(text.as_bytes(), &Vocabulary::byte_level()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[1].filtered);
        assert_eq!(recs[2].source_id.as_deref(), Some("s3"));
        assert_eq!(recs[2].extra["note"]["k"], 1);
        assert!(read_records("".as_bytes(), &Vocabulary::byte_level()).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_the_line() {
        let text = "{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\"}\n{\"prompt\":\"p\",\"chosen\":\"a\"}\n";
        match read_records(text.as_bytes(), &Vocabulary::byte_level()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("rejected"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad = "not json\n";
        assert!(matches!(
            read_records(bad.as_bytes(), &Vocabulary::byte_level()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn out_of_range_diff_is_rejected() {
        let text = r#"{"prompt":"p","chosen":"ab","rejected":"b","diff_chosen":[5],"diff_rejected":[]}"#;
        assert!(matches!(
            read_records(text.as_bytes(), &Vocabulary::byte_level()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn twelve_records_into_six_splits() {
        // rejected differs from chosen in exactly d trailing bytes
        let records: Vec<_> = (1..=12)
            .rev()
            .map(|d| rec("p", &"a".repeat(12), &format!("{}{}", "a".repeat(12 - d), "b".repeat(d))))
            .collect();
        let splits = partition_by_distance(&records, 6).unwrap();
        assert_eq!(splits.len(), 6);
        for (i, s) in splits.iter().enumerate() {
            assert_eq!(s.index, i + 1);
            let d: Vec<_> = s.records.iter().map(|r| r.distance(DistanceBasis::Original)).collect();
            assert_eq!(d, vec![2 * i + 1, 2 * i + 2]);
            assert_eq!(s.distance_stats.min, 2 * i + 1);
            assert_eq!(s.distance_stats.max, 2 * i + 2);
        }
    }

    #[test]
    fn ties_keep_input_order_and_sizes_are_balanced() {
        let records: Vec<_> = (0..7)
            .map(|i| {
                let mut r = rec("p", "aa", "ab");
                r.source_id = Some(i.to_string());
                r
            })
            .collect();
        let splits = partition_by_distance(&records, 3).unwrap();
        let sizes: Vec<_> = splits.iter().map(|s| s.records.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        let ids: Vec<_> = splits
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.source_id.clone().unwrap()))
            .collect();
        assert_eq!(ids, (0..7).map(|i| i.to_string()).collect::<Vec<_>>());
        assert!(partition_by_distance(&records, 8).is_err());
        assert!(partition_by_distance(&records, 0).is_err());
    }

    #[test]
    fn sixty_thousand_into_six_equal_splits() {
        let records = vec![rec("", "a", "b"); 60_000];
        let splits = partition_by_distance(&records, 6).unwrap();
        assert!(splits.iter().all(|s| s.records.len() == 10_000));
    }

    #[test]
    fn unfiltered_drops_exactly_flagged() {
        let mut records = vec![rec("", "a", "b"), rec("", "c", "d"), rec("", "e", "f")];
        records[1].filtered = true;
        let kept = unfiltered(&records);
        assert_eq!(kept, vec![records[0].clone(), records[2].clone()]);
    }
}
