//! Cross-subject and cross-activity train/test splits.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitBy {
    Subject,
    Activity,
}

impl fmt::Display for SplitBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitBy::Subject => "subject",
            SplitBy::Activity => "activity",
        })
    }
}

impl FromStr for SplitBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(SplitBy::Subject),
            "activity" => Ok(SplitBy::Activity),
            _ => Err(Error::Config(format!(
                "split must be `subject` or `activity`, got `{s}`"
            ))),
        }
    }
}

/// Held-out ids for `count` subjects or activities numbered from 1: ids 1, 2
/// and 10 where they exist, falling back to id 1 alone when that would leave
/// nothing to train on. A single id is never held out.
pub fn default_test_ids(count: u32) -> Vec<u32> {
    let ids: Vec<u32> = [1, 2, 10].into_iter().filter(|&i| i <= count).collect();
    match count {
        0 | 1 => Vec::new(),
        _ if ids.len() as u32 == count => vec![1],
        _ => ids,
    }
}

/// Sample indices on each side of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub by: SplitBy,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Splits `ds` so that samples whose subject (or activity) is listed in
    /// `test_ids` form the test side.
    pub fn new(ds: &Dataset, by: SplitBy, test_ids: &[u32]) -> Result<Self> {
        let count = match by {
            SplitBy::Subject => ds.header.subjects,
            SplitBy::Activity => ds.header.activities,
        };
        if let Some(bad) = test_ids.iter().find(|&&i| i == 0 || i > count) {
            return Err(Error::Config(format!(
                "test {by} id {bad} is outside 1..={count}"
            )));
        }
        let held: BTreeSet<u32> = test_ids.iter().copied().collect();
        let mut split = Split {
            by,
            train_ids: (1..=count).filter(|i| !held.contains(i)).collect(),
            test_ids: held.iter().copied().collect(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, s) in ds.samples.iter().enumerate() {
            let id = match by {
                SplitBy::Subject => s.subject,
                SplitBy::Activity => s.activity,
            };
            if held.contains(&id) {
                split.test.push(i);
            } else {
                split.train.push(i);
            }
        }
        Ok(split)
    }

    pub fn to_manifest(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "split = {}", self.by);
        let _ = writeln!(out, "train_ids = {}", join(&mut self.train_ids.iter().map(u32::to_string)));
        let _ = writeln!(out, "test_ids = {}", join(&mut self.test_ids.iter().map(u32::to_string)));
        let _ = writeln!(out, "train = {}", join(&mut self.train.iter().map(usize::to_string)));
        let _ = writeln!(out, "test = {}", join(&mut self.test.iter().map(usize::to_string)));
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Format(format!("bad entry `{s}` in manifest `{key}`")))
                })
                .collect()
        }
        let mut by = None;
        let (mut train_ids, mut test_ids, mut train, mut test) = (None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "split" => by = Some(v.parse()?),
                "train_ids" => train_ids = Some(list(k, v)?),
                "test_ids" => test_ids = Some(list(k, v)?),
                "train" => train = Some(list(k, v)?),
                "test" => test = Some(list(k, v)?),
                _ => return Err(Error::Format(format!("unknown manifest key `{k}`"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("manifest lacks `{k}`"));
        Ok(Split {
            by: by.ok_or_else(|| missing("split"))?,
            train_ids: train_ids.ok_or_else(|| missing("train_ids"))?,
            test_ids: test_ids.ok_or_else(|| missing("test_ids"))?,
            train: train.ok_or_else(|| missing("train"))?,
            test: test.ok_or_else(|| missing("test"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SequenceMode;
    use crate::data::{generate_dataset, GeneratorSpec};

    #[test]
    fn default_ids() {
        assert_eq!(default_test_ids(10), vec![1, 2, 10]);
        assert_eq!(default_test_ids(5), vec![1, 2]);
        assert_eq!(default_test_ids(2), vec![1]);
        assert!(default_test_ids(1).is_empty());
    }

    #[test]
    fn subject_split_is_disjoint_and_round_trips() {
        let ds = generate_dataset(&GeneratorSpec::new(SequenceMode::Temporal, 4, 2, 1, 0)).unwrap();
        let split = Split::new(&ds, SplitBy::Subject, &default_test_ids(4)).unwrap();
        assert_eq!(split.train.len() + split.test.len(), ds.len());
        for &i in &split.train {
            assert!(!split.test_ids.contains(&ds.samples[i].subject));
        }
        for &i in &split.test {
            assert!(split.test_ids.contains(&ds.samples[i].subject));
        }
        assert_eq!(Split::from_manifest(&split.to_manifest()).unwrap(), split);
    }

    #[test]
    fn rejects_unknown_ids() {
        let ds = generate_dataset(&GeneratorSpec::new(SequenceMode::Temporal, 2, 1, 1, 0)).unwrap();
        assert!(Split::new(&ds, SplitBy::Activity, &[2]).is_err());
    }
}
