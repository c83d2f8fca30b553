//! Per-writer training sets, classifiers and verification scores.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ScoreClass, ScoreRecord};
use crate::rng::{self, tag};

use super::features::{FeatureSet, SampleKind};
use super::svm::{train_svm, SvmConfig, SvmModel};

/// Where negative training samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NegativePolicy {
    /// `per_writer` genuine signatures of every development writer.
    Dev { per_writer: usize },
    /// `per_writer` reference signatures of every other exploitation writer.
    Peer { per_writer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WdProtocol {
    /// Genuine reference signatures per writer (`r`).
    pub reference: usize,
    pub negatives: NegativePolicy,
    pub svm: SvmConfig,
}

impl Default for WdProtocol {
    fn default() -> Self {
        WdProtocol { reference: 12, negatives: NegativePolicy::Dev { per_writer: 14 }, svm: SvmConfig::default() }
    }
}

/// Reference (training) rows of `writer`: `r` genuine rows drawn with a
/// writer-specific stream, returned in row order.
pub fn reference_rows(set: &FeatureSet, writer: u32, r: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rows = set.rows_of(writer, SampleKind::Genuine);
    if rows.len() < r {
        return Err(Error::Data(format!(
            "writer {writer} has {} genuine signatures, {r} references requested",
            rows.len()
        )));
    }
    rows.shuffle(&mut rng::stream(seed, &[tag::WD_SPLIT, writer as u64]));
    rows.truncate(r);
    rows.sort_unstable();
    Ok(rows)
}

/// Genuine rows of `writer` not used as references.
pub fn held_out_rows(set: &FeatureSet, writer: u32, r: usize, seed: u64) -> Result<Vec<usize>> {
    let refs = reference_rows(set, writer, r, seed)?;
    Ok(set.rows_of(writer, SampleKind::Genuine).into_iter().filter(|i| !refs.contains(i)).collect())
}

/// Labeled training data for one writer.
#[derive(Debug, Clone, PartialEq)]
pub struct WdDataset {
    pub writer: u32,
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl WdDataset {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Negative rows, shared by every target writer except that the target's own
/// rows are skipped under the peer policy.
fn negative_rows<'a>(
    exploit: &'a FeatureSet,
    dev: Option<&'a FeatureSet>,
    writer: u32,
    protocol: &WdProtocol,
    seed: u64,
) -> Result<(&'a FeatureSet, Vec<usize>)> {
    match protocol.negatives {
        NegativePolicy::Dev { per_writer } => {
            let dev = dev.ok_or_else(|| Error::Config("dev negative policy needs development features".into()))?;
            let mut out = Vec::new();
            for w in dev.writers() {
                let mut rows = dev.rows_of(w, SampleKind::Genuine);
                if rows.len() < per_writer {
                    return Err(Error::Data(format!(
                        "development writer {w} has {} genuine signatures, {per_writer} needed",
                        rows.len()
                    )));
                }
                rows.shuffle(&mut rng::stream(seed, &[tag::NEGATIVES, w as u64]));
                rows.truncate(per_writer);
                rows.sort_unstable();
                out.extend(rows);
            }
            Ok((dev, out))
        }
        NegativePolicy::Peer { per_writer } => {
            if per_writer > protocol.reference {
                return Err(Error::Config(format!(
                    "peer negatives ({per_writer}) cannot exceed the reference count ({})",
                    protocol.reference
                )));
            }
            let mut out = Vec::new();
            for w in exploit.writers().into_iter().filter(|&w| w != writer) {
                let refs = reference_rows(exploit, w, protocol.reference, seed)?;
                out.extend(refs.into_iter().take(per_writer));
            }
            Ok((exploit, out))
        }
    }
}

pub fn build_wd_dataset(
    exploit: &FeatureSet,
    dev: Option<&FeatureSet>,
    writer: u32,
    protocol: &WdProtocol,
    seed: u64,
) -> Result<WdDataset> {
    let pos = reference_rows(exploit, writer, protocol.reference, seed)?;
    let (neg_set, neg) = negative_rows(exploit, dev, writer, protocol, seed)?;
    let mut ds = WdDataset {
        writer,
        x: Vec::with_capacity(pos.len() + neg.len()),
        labels: Vec::with_capacity(pos.len() + neg.len()),
        ids: Vec::with_capacity(pos.len() + neg.len()),
    };
    for (set, rows, label) in [(exploit, &pos, true), (neg_set, &neg, false)] {
        for &i in rows {
            let rec = &set.records[i];
            // Leakage guard: only genuine signatures ever enter training, and
            // negatives never come from the target writer.
            if rec.is_forgery() || (!label && std::ptr::eq(set, exploit) && rec.writer == writer) {
                return Err(Error::State(format!(
                    "training set for writer {writer} would contain {} ({:?} of writer {})",
                    rec.id, rec.kind, rec.writer
                )));
            }
            ds.x.push(set.row_f64(i));
            ds.labels.push(label);
            ds.ids.push(rec.id.clone());
        }
    }
    if ds.negatives() == 0 {
        return Err(Error::Data(format!("no negative samples for writer {writer}")));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterClassifier {
    pub writer: u32,
    pub model: SvmModel,
}

/// Versioned classifier file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBundle {
    pub version: u32,
    pub config_hash: String,
    pub protocol: WdProtocol,
    pub classifiers: Vec<WriterClassifier>,
}

impl ClassifierBundle {
    pub const VERSION: u32 = 1;

    pub fn get(&self, writer: u32) -> Option<&SvmModel> {
        self.classifiers.iter().find(|c| c.writer == writer).map(|c| &c.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("classifiers serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: ClassifierBundle =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if b.version != Self::VERSION {
            return Err(Error::Data(format!(
                "{}: classifier file version {} (expected {})",
                path.display(),
                b.version,
                Self::VERSION
            )));
        }
        Ok(b)
    }
}

/// Trains one classifier per exploitation writer (in parallel, collected in
/// writer order).
pub fn train_writer_classifiers(
    exploit: &FeatureSet,
    dev: Option<&FeatureSet>,
    protocol: &WdProtocol,
    seed: u64,
) -> Result<ClassifierBundle> {
    if dev.is_some_and(|d| d.config_hash != exploit.config_hash) {
        return Err(Error::Data("development and exploitation features come from different configs".into()));
    }
    let classifiers = exploit
        .writers()
        .par_iter()
        .map(|&w| {
            let ds = build_wd_dataset(exploit, dev, w, protocol, seed)?;
            let model = train_svm(&ds.x, &ds.labels, &protocol.svm)?;
            Ok(WriterClassifier { writer: w, model })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierBundle {
        version: ClassifierBundle::VERSION,
        config_hash: exploit.config_hash.clone(),
        protocol: protocol.clone(),
        classifiers,
    })
}

/// Scores every writer's held-out genuine signatures, its forgeries, and the
/// held-out genuine signatures of all other writers (random forgeries).
pub fn score_writers(exploit: &FeatureSet, bundle: &ClassifierBundle, seed: u64) -> Result<Vec<ScoreRecord>> {
    if bundle.config_hash != exploit.config_hash {
        return Err(Error::Data(format!(
            "classifiers ({}) and features ({}) come from different configs",
            bundle.config_hash, exploit.config_hash
        )));
    }
    let r = bundle.protocol.reference;
    let writers = exploit.writers();
    let held: Vec<Vec<usize>> = writers.iter().map(|&w| held_out_rows(exploit, w, r, seed)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (wi, &w) in writers.iter().enumerate() {
        let model = bundle.get(w).ok_or_else(|| Error::Data(format!("no classifier for writer {w}")))?;
        let mut push = |row: usize, class: ScoreClass| -> Result<()> {
            out.push(ScoreRecord {
                writer: w,
                id: exploit.records[row].id.clone(),
                class,
                score: model.decision(&exploit.row_f64(row))?,
            });
            Ok(())
        };
        for &i in &held[wi] {
            push(i, ScoreClass::Genuine)?;
        }
        for (wj, rows) in held.iter().enumerate() {
            if wj != wi {
                for &i in rows {
                    push(i, ScoreClass::Random)?;
                }
            }
        }
        for i in exploit.rows_of(w, SampleKind::Simple) {
            push(i, ScoreClass::Simple)?;
        }
        for i in exploit.rows_of(w, SampleKind::Skilled) {
            push(i, ScoreClass::Skilled)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wd::features::FeatureRecord;

    fn set(writers: u32, genuine: usize, skilled: usize) -> FeatureSet {
        let mut s = FeatureSet::new(2, "h");
        for w in 0..writers {
            for i in 0..genuine + skilled {
                let kind = if i < genuine { SampleKind::Genuine } else { SampleKind::Skilled };
                let shift = if kind == SampleKind::Skilled { 0.5 } else { 0.0 };
                let v = [w as f32 + 0.1 * i as f32 + shift, (w * 2) as f32 - 0.05 * i as f32];
                s.push(FeatureRecord { id: format!("w{w}-{i}"), writer: w, kind }, &v).unwrap();
            }
        }
        s
    }

    #[test]
    fn peer_policy_counts() {
        let s = set(5, 3, 2);
        let p = WdProtocol { reference: 3, negatives: NegativePolicy::Peer { per_writer: 3 }, ..WdProtocol::default() };
        let ds = build_wd_dataset(&s, None, 2, &p, 1).unwrap();
        assert_eq!(ds.positives(), 3);
        assert_eq!(ds.negatives(), 12);
        for (id, &label) in ds.ids.iter().zip(&ds.labels) {
            assert_eq!(id.starts_with("w2-"), label, "{id}");
        }
    }

    #[test]
    fn dev_policy_counts_and_sharing() {
        let exploit = set(3, 6, 2);
        let dev = set(7, 5, 0);
        let p = WdProtocol { reference: 4, negatives: NegativePolicy::Dev { per_writer: 5 }, ..WdProtocol::default() };
        let a = build_wd_dataset(&exploit, Some(&dev), 0, &p, 9).unwrap();
        let b = build_wd_dataset(&exploit, Some(&dev), 1, &p, 9).unwrap();
        assert_eq!((a.positives(), a.negatives()), (4, 35));
        let neg = |d: &WdDataset| {
            d.ids.iter().zip(&d.labels).filter(|(_, &l)| !l).map(|(i, _)| i.clone()).collect::<Vec<_>>()
        };
        assert_eq!(neg(&a), neg(&b));
    }

    #[test]
    fn never_trains_on_forgeries() {
        let s = set(4, 5, 3);
        let p = WdProtocol { reference: 5, negatives: NegativePolicy::Peer { per_writer: 2 }, ..WdProtocol::default() };
        for w in 0..4 {
            let ds = build_wd_dataset(&s, None, w, &p, 3).unwrap();
            for id in &ds.ids {
                let rec = s.records.iter().find(|r| &r.id == id).unwrap();
                assert_eq!(rec.kind, SampleKind::Genuine);
            }
        }
    }

    #[test]
    fn insufficient_genuine() {
        let s = set(2, 3, 0);
        let p = WdProtocol { reference: 4, negatives: NegativePolicy::Peer { per_writer: 1 }, ..WdProtocol::default() };
        assert!(build_wd_dataset(&s, None, 0, &p, 0).is_err());
    }

    #[test]
    fn seeded_selection_is_reproducible() {
        let s = set(3, 10, 0);
        let p = WdProtocol { reference: 4, negatives: NegativePolicy::Peer { per_writer: 2 }, ..WdProtocol::default() };
        let a = train_writer_classifiers(&s, None, &p, 5).unwrap();
        let b = train_writer_classifiers(&s, None, &p, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(reference_rows(&s, 0, 4, 5).unwrap(), reference_rows(&s, 0, 4, 6).unwrap());
    }

    #[test]
    fn scoring_classes_and_hash_guard() {
        let s = set(3, 6, 2);
        let p = WdProtocol { reference: 4, negatives: NegativePolicy::Peer { per_writer: 2 }, ..WdProtocol::default() };
        let bundle = train_writer_classifiers(&s, None, &p, 1).unwrap();
        let scores = score_writers(&s, &bundle, 1).unwrap();
        let count = |w: u32, c: ScoreClass| scores.iter().filter(|r| r.writer == w && r.class == c).count();
        assert_eq!(count(0, ScoreClass::Genuine), 2);
        assert_eq!(count(0, ScoreClass::Random), 4);
        assert_eq!(count(0, ScoreClass::Skilled), 2);
        let mut other = s.clone();
        other.config_hash = "x".into();
        assert!(score_writers(&other, &bundle, 1).is_err());
    }

    #[test]
    fn bundle_file_round_trip() {
        let s = set(2, 4, 0);
        let p = WdProtocol { reference: 2, negatives: NegativePolicy::Peer { per_writer: 2 }, ..WdProtocol::default() };
        let bundle = train_writer_classifiers(&s, None, &p, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wd.json");
        bundle.save(&path).unwrap();
        assert_eq!(ClassifierBundle::load(&path).unwrap(), bundle);
    }
}
