//! Line-oriented text formats for features, matchings, models, ground truth
//! and reports.
//!
//! Every file starts with a `#` header naming its kind; other `#` lines and
//! blank lines are ignored. Floats are written in shortest round-trip form, so
//! reading a written value gives back the same bits.
//!
//! ```text
//! # features left 2 3            side, count, descriptor dimension
//! 0 10.5 20 0.6 0.8 0            id x y d...
//! # matches 2 objective 1500000  count, objective in ticks or `-`
//! 0 1 0                          p q label (model id, `phi`, or `-` for none)
//! # models 1                     then: h, 9 matrix entries, 9 inverse entries
//! # ground-truth 3 120 118       models, left count, right count
//! model h ... / pair p q h / left p plane / right q plane
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gap::{JointMatching, Label, Triple};
use crate::geometry::{Descriptor, Feature, FeatureSet, Homography, Point2, Side};
use crate::labeling::ProposalPool;
use crate::scene::GroundTruth;

fn perr(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| perr(line, format!("bad {what} '{tok}'")))
}

type Records<'a> = Vec<(usize, &'a str)>;

/// Header tokens after `#` and the remaining record lines with their line numbers.
fn split<'a>(text: &'a str, kind: &str) -> Result<(Vec<&'a str>, Records<'a>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let header = loop {
        match lines.next() {
            Some((_, "")) => continue,
            Some((n, l)) => {
                let toks: Vec<&str> = l.trim_start_matches('#').split_whitespace().collect();
                if !l.starts_with('#') || toks.first() != Some(&kind) {
                    return Err(perr(n, format!("expected '# {kind}' header")));
                }
                break toks[1..].to_vec();
            }
            None => return Err(Error::Parse(format!("empty file, expected '# {kind}' header"))),
        }
    };
    let body = lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
    Ok((header, body))
}

pub fn write_features(set: &FeatureSet) -> String {
    let real: Vec<&Feature> = set.iter().filter(|f| !f.is_dummy()).collect();
    let dim = real.first().and_then(|f| f.desc.as_ref()).map_or(0, |d| d.dim());
    let mut out = format!("# features {} {} {}\n", set.side.as_str(), real.len(), dim);
    for f in real {
        let _ = write!(out, "{} {} {}", f.id, f.pos.x, f.pos.y);
        for v in f.desc.as_ref().map_or(&[][..], |d| d.values()) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn read_features(text: &str) -> Result<FeatureSet> {
    let (header, body) = split(text, "features")?;
    let side = match header.first().copied() {
        Some("left") => Side::Left,
        Some("right") => Side::Right,
        other => return Err(perr(1, format!("bad side {other:?}"))),
    };
    let count: usize = num(header.get(1).copied(), 1, "count")?;
    let dim: usize = num(header.get(2).copied(), 1, "dimension")?;
    if body.len() != count {
        return Err(Error::Parse(format!("header says {count} features, found {}", body.len())));
    }
    let mut feats = Vec::with_capacity(count);
    for (n, l) in body {
        let mut t = l.split_whitespace();
        let id: usize = num(t.next(), n, "id")?;
        let x: f64 = num(t.next(), n, "x")?;
        let y: f64 = num(t.next(), n, "y")?;
        let d: Vec<f64> = t.map(|v| num(Some(v), n, "descriptor value")).collect::<Result<_>>()?;
        if d.len() != dim {
            return Err(perr(n, format!("descriptor has {} values, expected {dim}", d.len())));
        }
        let desc = Descriptor::from_unit(d).map_err(|e| perr(n, e))?;
        feats.push(Feature::new(id, Point2::new(x, y), desc));
    }
    FeatureSet::new(side, feats)
}

/// One line of a matches file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchRecord {
    pub p: usize,
    pub q: usize,
    /// `None` for an unlabeled pair.
    pub label: Option<Label>,
}

/// A matches file: records plus the objective when the pairs form a full matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchFile {
    pub records: Vec<MatchRecord>,
    pub objective: Option<i64>,
}

impl MatchFile {
    pub fn from_matching(m: &JointMatching) -> Self {
        Self {
            records: m.triples.iter().map(|t| MatchRecord { p: t.p, q: t.q, label: Some(t.label) }).collect(),
            objective: Some(m.objective),
        }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self { records: pairs.iter().map(|&(p, q)| MatchRecord { p, q, label: None }).collect(), objective: None }
    }

    /// The full labeled matching, validated over `n` features per side.
    pub fn to_matching(&self, n: usize) -> Result<JointMatching> {
        let objective = self.objective.ok_or_else(|| Error::Parse("matching has no objective".into()))?;
        let triples = self
            .records
            .iter()
            .map(|r| {
                r.label
                    .map(|label| Triple { p: r.p, q: r.q, label })
                    .ok_or_else(|| Error::Parse(format!("pair ({}, {}) has no label", r.p, r.q)))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = JointMatching::new(triples, objective);
        m.validate(n)?;
        Ok(m)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.records.iter().map(|r| (r.p, r.q)).collect()
    }
}

pub fn write_matches(file: &MatchFile) -> String {
    let objective = file.objective.map_or("-".to_string(), |o| o.to_string());
    let mut out = format!("# matches {} objective {objective}\n", file.records.len());
    for r in &file.records {
        let label = r.label.map_or("-".to_string(), |l| l.to_string());
        let _ = writeln!(out, "{} {} {label}", r.p, r.q);
    }
    out
}

fn parse_label(tok: Option<&str>, line: usize) -> Result<Option<Label>> {
    match tok {
        Some("-") => Ok(None),
        Some("phi") => Ok(Some(Label::Outlier)),
        other => Ok(Some(Label::Model(num(other, line, "label")?))),
    }
}

pub fn read_matches(text: &str) -> Result<MatchFile> {
    let (header, body) = split(text, "matches")?;
    let count: usize = num(header.first().copied(), 1, "count")?;
    if header.get(1) != Some(&"objective") {
        return Err(perr(1, "expected 'objective' in header"));
    }
    let objective = match header.get(2).copied() {
        Some("-") => None,
        tok => Some(num(tok, 1, "objective")?),
    };
    if body.len() != count {
        return Err(Error::Parse(format!("header says {count} matches, found {}", body.len())));
    }
    let records = body
        .into_iter()
        .map(|(n, l)| {
            let mut t = l.split_whitespace();
            let p = num(t.next(), n, "p")?;
            let q = num(t.next(), n, "q")?;
            let label = parse_label(t.next(), n)?;
            if t.next().is_some() {
                return Err(perr(n, "trailing tokens"));
            }
            Ok(MatchRecord { p, q, label })
        })
        .collect::<Result<_>>()?;
    Ok(MatchFile { records, objective })
}

fn write_homography(out: &mut String, h: &Homography) {
    for row in h.rows().iter().chain(h.inverse_rows().iter()) {
        for v in row {
            let _ = write!(out, " {v}");
        }
    }
}

fn read_homography<'a>(t: &mut impl Iterator<Item = &'a str>, line: usize) -> Result<Homography> {
    let mut v = [0.0f64; 18];
    for x in v.iter_mut() {
        *x = num(t.next(), line, "matrix entry")?;
    }
    let rows = |o: usize| [[v[o], v[o + 1], v[o + 2]], [v[o + 3], v[o + 4], v[o + 5]], [v[o + 6], v[o + 7], v[o + 8]]];
    Homography::from_stored(rows(0), rows(9)).map_err(|e| perr(line, e))
}

pub fn write_models(pool: &ProposalPool) -> String {
    let mut out = format!("# models {}\n", pool.len());
    for (h, m) in pool.models.iter().enumerate() {
        let _ = write!(out, "{h}");
        write_homography(&mut out, m);
        out.push('\n');
    }
    out
}

pub fn read_models(text: &str) -> Result<ProposalPool> {
    let (header, body) = split(text, "models")?;
    let count: usize = num(header.first().copied(), 1, "count")?;
    if body.len() != count {
        return Err(Error::Parse(format!("header says {count} models, found {}", body.len())));
    }
    let mut models = Vec::with_capacity(count);
    for (i, (n, l)) in body.into_iter().enumerate() {
        let mut t = l.split_whitespace();
        let h: usize = num(t.next(), n, "model id")?;
        if h != i {
            return Err(perr(n, format!("model id {h} out of order")));
        }
        models.push(read_homography(&mut t, n)?);
    }
    Ok(ProposalPool::new(models))
}

pub fn write_ground_truth(gt: &GroundTruth) -> String {
    let mut out = format!("# ground-truth {} {} {}\n", gt.models.len(), gt.left_plane.len(), gt.right_plane.len());
    for (h, m) in gt.models.iter().enumerate() {
        let _ = write!(out, "model {h}");
        write_homography(&mut out, m);
        out.push('\n');
    }
    for &(p, q, h) in &gt.pairs {
        let _ = writeln!(out, "pair {p} {q} {h}");
    }
    for (p, h) in gt.left_plane.iter().enumerate() {
        let _ = writeln!(out, "left {p} {h}");
    }
    for (q, h) in gt.right_plane.iter().enumerate() {
        let _ = writeln!(out, "right {q} {h}");
    }
    out
}

pub fn read_ground_truth(text: &str) -> Result<GroundTruth> {
    let (header, body) = split(text, "ground-truth")?;
    let nm: usize = num(header.first().copied(), 1, "model count")?;
    let nl: usize = num(header.get(1).copied(), 1, "left count")?;
    let nr: usize = num(header.get(2).copied(), 1, "right count")?;
    let mut gt = GroundTruth { models: Vec::new(), pairs: Vec::new(), left_plane: Vec::new(), right_plane: Vec::new() };
    for (n, l) in body {
        let mut t = l.split_whitespace();
        let kind = t.next().unwrap_or_default();
        let idx: usize = num(t.next(), n, "index")?;
        match kind {
            "model" if idx == gt.models.len() => gt.models.push(read_homography(&mut t, n)?),
            "pair" => {
                let q = num(t.next(), n, "right id")?;
                let h = num(t.next(), n, "plane")?;
                gt.pairs.push((idx, q, h));
            }
            "left" if idx == gt.left_plane.len() => gt.left_plane.push(num(t.next(), n, "plane")?),
            "right" if idx == gt.right_plane.len() => gt.right_plane.push(num(t.next(), n, "plane")?),
            _ => return Err(perr(n, format!("unexpected record '{kind} {idx}'"))),
        }
    }
    if gt.models.len() != nm || gt.left_plane.len() != nl || gt.right_plane.len() != nr {
        return Err(Error::Parse("record counts disagree with the header".into()));
    }
    for &(p, q, h) in &gt.pairs {
        if p >= nl || q >= nr || h >= nm {
            return Err(Error::Parse(format!("pair ({p}, {q}, {h}) out of range")));
        }
    }
    Ok(gt)
}

/// A report: ordered `key = value` entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl std::fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1.as_str())
    }

    /// Machine-readable form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# report\n");
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Aligned two-column table for terminals.
    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|e| e.0.len()).max().unwrap_or(0);
        self.entries.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (_, body) = split(text, "report")?;
        let entries = body
            .into_iter()
            .map(|(n, l)| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| perr(n, "expected 'key = value'"))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn features_round_trip() {
        let (l, r, gt) = generate_scene(&SceneSpec { features_per_plane: 10, noise_sigma: 0.3, ..SceneSpec::default() }).unwrap();
        assert_eq!(read_features(&write_features(&l)).unwrap(), l);
        assert_eq!(read_features(&write_features(&r)).unwrap(), r);
        assert_eq!(read_ground_truth(&write_ground_truth(&gt)).unwrap(), gt);
    }

    #[test]
    fn matches_and_models_round_trip() {
        let m = JointMatching::new(
            vec![Triple { p: 0, q: 1, label: Label::Model(2) }, Triple { p: 1, q: 0, label: Label::Outlier }],
            1_234,
        );
        let f = MatchFile::from_matching(&m);
        let back = read_matches(&write_matches(&f)).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_matching(2).unwrap(), m);
        let pairs = MatchFile::from_pairs(&[(3, 4)]);
        assert_eq!(read_matches(&write_matches(&pairs)).unwrap(), pairs);

        let pool = ProposalPool::new(vec![
            Homography::from_rows([[1.1, 0.2, 3.3], [0.01, 0.9, -7.0], [1e-4, 2e-5, 1.0]]).unwrap(),
            Homography::identity(),
        ]);
        assert_eq!(read_models(&write_models(&pool)).unwrap(), pool);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(read_features("0 1 2 1 0\n").is_err());
        assert!(read_features("# features left 1 2\n0 1 2 1\n").is_err());
        assert!(read_features("# features left 2 2\n0 1 2 1 0\n").is_err());
        assert!(read_matches("# matches 1 objective -\n0 x 1\n").is_err());
        assert!(read_models("# models 1\n0 1 2\n").is_err());
        let r = Report::parse("# report\na = 1\nb = x y\n").unwrap();
        assert_eq!(r.get("b"), Some("x y"));
    }
}
