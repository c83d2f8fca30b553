//! Verification error rates: FAR/FRR curves, equal error rates, AER.
//!
//! Conventions: a sample is accepted when `score >= t`, so
//! `FRR(t) = #{genuine < t} / n_g` and `FAR(t) = #{forgery >= t} / n_f`.
//! All rates are percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreClass {
    Genuine,
    Random,
    Simple,
    Skilled,
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub writer: u32,
    pub id: String,
    pub class: ScoreClass,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WriterScores {
    pub genuine: Vec<f64>,
    pub random: Vec<f64>,
    pub simple: Vec<f64>,
    pub skilled: Vec<f64>,
}

impl WriterScores {
    pub fn class(&self, class: ScoreClass) -> &[f64] {
        match class {
            ScoreClass::Genuine => &self.genuine,
            ScoreClass::Random => &self.random,
            ScoreClass::Simple => &self.simple,
            ScoreClass::Skilled => &self.skilled,
        }
    }

    fn class_mut(&mut self, class: ScoreClass) -> &mut Vec<f64> {
        match class {
            ScoreClass::Genuine => &mut self.genuine,
            ScoreClass::Random => &mut self.random,
            ScoreClass::Simple => &mut self.simple,
            ScoreClass::Skilled => &mut self.skilled,
        }
    }
}

/// Scores grouped by writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub writers: BTreeMap<u32, WriterScores>,
}

impl ScoreSet {
    pub fn from_records(records: &[ScoreRecord]) -> Result<Self> {
        let mut set = ScoreSet::default();
        for r in records {
            if !r.score.is_finite() {
                return Err(Error::numeric("scores", format!("{} has score {}", r.id, r.score)));
            }
            set.writers.entry(r.writer).or_default().class_mut(r.class).push(r.score);
        }
        Ok(set)
    }

    pub fn pooled(&self, class: ScoreClass) -> Vec<f64> {
        self.writers.values().flat_map(|w| w.class(class).iter().copied()).collect()
    }

    pub fn has_class(&self, class: ScoreClass) -> bool {
        self.writers.values().any(|w| !w.class(class).is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

fn finite_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Data(format!("no {what} scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("scores", format!("non-finite {what} score")));
    }
    Ok(())
}

/// FRR/FAR at `-∞`, every distinct score (ascending) and `+∞`.
pub fn far_frr_curve(genuine: &[f64], forgery: &[f64]) -> Result<Vec<CurvePoint>> {
    finite_scores(genuine, "genuine")?;
    finite_scores(forgery, "forgery")?;
    let mut g = genuine.to_vec();
    let mut f = forgery.to_vec();
    g.sort_by(f64::total_cmp);
    f.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&f).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, nf) = (g.len() as f64, f.len() as f64);
    let mut out = Vec::with_capacity(thresholds.len() + 2);
    out.push(CurvePoint { threshold: f64::NEG_INFINITY, frr: 0.0, far: 100.0 });
    let (mut gi, mut fi) = (0, 0);
    for t in thresholds {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while fi < f.len() && f[fi] < t {
            fi += 1;
        }
        out.push(CurvePoint { threshold: t, frr: 100.0 * gi as f64 / ng, far: 100.0 * (f.len() - fi) as f64 / nf });
    }
    out.push(CurvePoint { threshold: f64::INFINITY, frr: 100.0, far: 0.0 });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub percent: f64,
    /// The finite breakpoint at (or just below) the crossing.
    pub threshold: f64,
}

/// Crossing of the FAR and FRR step functions, linearly interpolated between
/// the two breakpoints that bracket the sign change of `FAR − FRR`.
pub fn eer(genuine: &[f64], forgery: &[f64]) -> Result<Eer> {
    let curve = far_frr_curve(genuine, forgery)?;
    let k = curve.iter().position(|p| p.frr >= p.far).expect("the +inf sentinel has FRR 100, FAR 0");
    let (a, b) = (curve[k - 1], curve[k]);
    let (da, db) = (a.far - a.frr, b.far - b.frr);
    let t = da / (da - db);
    let percent = a.frr + t * (b.frr - a.frr);
    let threshold = if b.threshold.is_finite() { b.threshold } else { a.threshold };
    Ok(Eer { percent, threshold })
}

/// EER over the scores of all writers pooled together.
pub fn eer_global(set: &ScoreSet, forgery: ScoreClass) -> Result<Eer> {
    eer(&set.pooled(ScoreClass::Genuine), &set.pooled(forgery))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEer {
    /// Unweighted mean of the per-writer EERs.
    pub percent: f64,
    pub per_writer: BTreeMap<u32, f64>,
    /// Writers skipped because one of the two classes was empty.
    pub excluded: Vec<u32>,
}

/// Mean of per-writer EERs, each at the writer's own threshold.
pub fn eer_user(set: &ScoreSet, forgery: ScoreClass) -> Result<UserEer> {
    let mut per_writer = BTreeMap::new();
    let mut excluded = Vec::new();
    for (&w, s) in &set.writers {
        if s.genuine.is_empty() || s.class(forgery).is_empty() {
            excluded.push(w);
            continue;
        }
        per_writer.insert(w, eer(&s.genuine, s.class(forgery))?.percent);
    }
    if !excluded.is_empty() {
        log::warn!("{} writer(s) excluded from user EER: missing scores", excluded.len());
    }
    if per_writer.is_empty() {
        return Err(Error::Data(format!("no writer has both genuine and {forgery:?} scores")));
    }
    let percent = per_writer.values().sum::<f64>() / per_writer.len() as f64;
    Ok(UserEer { percent, per_writer, excluded })
}

/// Percentage of `genuine` rejected at `threshold`.
pub fn frr_at(genuine: &[f64], threshold: f64) -> Result<f64> {
    finite_scores(genuine, "genuine")?;
    Ok(100.0 * genuine.iter().filter(|&&s| s < threshold).count() as f64 / genuine.len() as f64)
}

/// Percentage of `forgery` accepted at `threshold`.
pub fn far_at(forgery: &[f64], threshold: f64) -> Result<f64> {
    finite_scores(forgery, "forgery")?;
    Ok(100.0 * forgery.iter().filter(|&&s| s >= threshold).count() as f64 / forgery.len() as f64)
}

/// `(AER, AER_genuine+skilled)` where AER averages FRR and the three FARs.
pub fn aer(frr: f64, far_random: f64, far_simple: Option<f64>, far_skilled: f64) -> Result<(f64, f64)> {
    let far_simple = far_simple
        .ok_or_else(|| Error::Data("AER needs simple-forgery scores; the four-term formula is fixed".into()))?;
    for (name, v) in
        [("FRR", frr), ("FAR random", far_random), ("FAR simple", far_simple), ("FAR skilled", far_skilled)]
    {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Data(format!("{name} = {v} is not a percentage")));
        }
    }
    Ok(((frr + far_random + far_simple + far_skilled) / 4.0, (frr + far_skilled) / 2.0))
}

/// Summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    /// Decision threshold for FRR / FAR / AER.
    pub threshold: f64,
    pub frr: f64,
    pub far_random: f64,
    pub far_simple: Option<f64>,
    pub far_skilled: Option<f64>,
    pub aer: Option<f64>,
    pub aer_genuine_skilled: Option<f64>,
    pub eer_global_skilled: Option<Eer>,
    pub eer_user_skilled: Option<f64>,
    pub eer_global_random: Eer,
    pub eer_user_random: f64,
    pub writers: usize,
    pub excluded_writers: Vec<u32>,
}

/// Computes every metric available in `set`; missing forgery classes leave
/// the dependent fields empty.
pub fn build_report(set: &ScoreSet, threshold: f64, config_hash: &str) -> Result<MetricsReport> {
    let genuine = set.pooled(ScoreClass::Genuine);
    let frr = frr_at(&genuine, threshold)?;
    let far_random = far_at(&set.pooled(ScoreClass::Random), threshold)?;
    let far_of = |c: ScoreClass| -> Result<Option<f64>> {
        if set.has_class(c) {
            far_at(&set.pooled(c), threshold).map(Some)
        } else {
            Ok(None)
        }
    };
    let far_simple = far_of(ScoreClass::Simple)?;
    let far_skilled = far_of(ScoreClass::Skilled)?;
    let aer_value = match (far_simple, far_skilled) {
        (Some(s), Some(k)) => Some(aer(frr, far_random, Some(s), k)?.0),
        _ => None,
    };
    let user_random = eer_user(set, ScoreClass::Random)?;
    let mut excluded = user_random.excluded.clone();
    let (eer_global_skilled, eer_user_skilled) = if set.has_class(ScoreClass::Skilled) {
        let u = eer_user(set, ScoreClass::Skilled)?;
        excluded.extend(&u.excluded);
        (Some(eer_global(set, ScoreClass::Skilled)?), Some(u.percent))
    } else {
        (None, None)
    };
    excluded.sort_unstable();
    excluded.dedup();
    Ok(MetricsReport {
        config_hash: config_hash.to_string(),
        threshold,
        frr,
        far_random,
        far_simple,
        far_skilled,
        aer: aer_value,
        aer_genuine_skilled: far_skilled.map(|k| (frr + k) / 2.0),
        eer_global_skilled,
        eer_user_skilled,
        eer_global_random: eer_global(set, ScoreClass::Random)?,
        eer_user_random: user_random.percent,
        writers: set.writers.len(),
        excluded_writers: excluded,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: FRR, FAR random / simple / skilled, AER, AER g+s, EER.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>9} {:>9} {:>9} {:>7} {:>9} {:>12} {:>10}",
            "FRR", "FAR_rand", "FAR_simp", "FAR_skil", "AER", "AER_g+s", "EER_global", "EER_user"
        );
        let _ = writeln!(
            s,
            "{:>7} {:>9} {:>9} {:>9} {:>7} {:>9} {:>12} {:>10}",
            cell(Some(self.frr)),
            cell(Some(self.far_random)),
            cell(self.far_simple),
            cell(self.far_skilled),
            cell(self.aer),
            cell(self.aer_genuine_skilled),
            cell(self.eer_global_skilled.map(|e| e.percent)),
            cell(self.eer_user_skilled),
        );
        let _ = writeln!(
            s,
            "random forgeries: EER_global {:.2}, EER_user {:.2}; threshold {}; {} writers",
            self.eer_global_random.percent, self.eer_user_random, self.threshold, self.writers
        );
        s
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    config_hash: String,
}

/// JSON-lines score file: a header line with the config hash, then one
/// record per line.
pub fn write_scores(path: &Path, config_hash: &str, records: &[ScoreRecord]) -> Result<()> {
    let mut out = Vec::new();
    let header = ScoreHeader { config_hash: config_hash.to_string() };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<(String, Vec<ScoreRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |n: usize, e: &dyn std::fmt::Display| Error::Data(format!("{}:{n}: {e}", path.display()));
    let header: ScoreHeader = match lines.next() {
        Some(l) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| bad(1, &e))?
        }
        None => return Err(bad(1, &"empty score file")),
    };
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(n + 2, &e))?);
    }
    Ok((header.config_hash, records))
}
