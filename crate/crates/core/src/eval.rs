//! Detection-based mixture/missing evaluation.
//!
//! Each generated image comes with open-vocabulary detector output for the k
//! prompted objects. Two differently-labeled confident boxes that overlap
//! above the threshold mark a mixed object; an object is present when it has
//! a confident box that takes part in no mixture pair. Images are binned into
//! the outcome categories below and the bins feed the information-bias ratio.
//!
//! Input is JSON Lines, one [`DetectionRecord`] per line:
//!
//! ```json
//! {"image_id": "0001", "prompt": "a cat and a dog", "objects": ["cat", "dog"],
//!  "detections": [{"label": "cat", "score": 0.81, "box": [0.1, 0.2, 0.5, 0.9]}]}
//! ```
//!
//! Boxes are `[x0, y0, x1, y1]` normalized to `[0, 1]` with `x0 < x1` and
//! `y0 < y1`. An optional `"invalid"` string marks records the producer could
//! not process. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self([x0, y0, x1, y1])
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.0;
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let [x0, y0, x1, y1] = self.0;
        if self.0.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(format!("box {:?} not normalized to [0, 1]", self.0));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(format!("box {:?} is not ordered (x0 < x1, y0 < y1)", self.0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub prompt: String,
    pub objects: Vec<String>,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid: Option<String>,
}

impl DetectionRecord {
    pub fn k(&self) -> usize {
        self.objects.len()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidRecord { image_id: self.image_id.clone(), reason: reason.into() }
    }

    /// Object index of every detection, validating labels, scores and boxes.
    fn label_indices(&self) -> Result<Vec<usize>> {
        if let Some(reason) = &self.invalid {
            return Err(self.invalid(reason.clone()));
        }
        if self.k() < 2 {
            return Err(self.invalid(format!("needs at least 2 objects, has {}", self.k())));
        }
        for (a, name) in self.objects.iter().enumerate() {
            if self.objects[..a].contains(name) {
                return Err(self.invalid(format!("object {name:?} listed twice")));
            }
        }
        self.detections
            .iter()
            .map(|d| {
                let idx = self
                    .objects
                    .iter()
                    .position(|o| *o == d.label)
                    .ok_or_else(|| self.invalid(format!("unknown label {:?}", d.label)))?;
                if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                    return Err(self.invalid(format!("score {} outside [0, 1]", d.score)));
                }
                d.bbox.check().map_err(|r| self.invalid(r))?;
                Ok(idx)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMeasure {
    /// Intersection divided by the smaller box's area.
    #[default]
    #[serde(rename = "min-area")]
    IntersectionOverMin,
    Iou,
}

impl std::str::FromStr for OverlapMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-area" => Ok(Self::IntersectionOverMin),
            "iou" => Ok(Self::Iou),
            other => Err(Error::Config(format!("unknown overlap measure {other:?} (min-area | iou)"))),
        }
    }
}

impl std::fmt::Display for OverlapMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::IntersectionOverMin => "min-area",
            Self::Iou => "iou",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub overlap_threshold: f64,
    pub single_conf: f64,
    pub mixture_conf: f64,
    pub measure: OverlapMeasure,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { overlap_threshold: 0.90, single_conf: 0.25, mixture_conf: 0.15, measure: OverlapMeasure::IntersectionOverMin }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("overlap_threshold", self.overlap_threshold),
            ("single_conf", self.single_conf),
            ("mixture_conf", self.mixture_conf),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn box_overlap(a: &BBox, b: &BBox, measure: OverlapMeasure) -> Result<f64> {
    for bx in [a, b] {
        if bx.area() <= 0.0 {
            return Err(Error::DegenerateBox(bx.0));
        }
    }
    let iw = (a.0[2].min(b.0[2]) - a.0[0].max(b.0[0])).max(0.0);
    let ih = (a.0[3].min(b.0[3]) - a.0[1].max(b.0[1])).max(0.0);
    let inter = iw * ih;
    let denom = match measure {
        OverlapMeasure::IntersectionOverMin => a.area().min(b.area()),
        OverlapMeasure::Iou => a.area() + b.area() - inter,
    };
    Ok((inter / denom).clamp(0.0, 1.0))
}

/// Present objects (0-based, sorted) and the mixture flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutcomeCategory {
    pub present: Vec<usize>,
    pub mixture: bool,
}

impl OutcomeCategory {
    /// Canonical category for a raw classification: when every object is
    /// present the image counts as "all objects exist" whatever the mixture
    /// flag says.
    pub fn canonical(mut present: Vec<usize>, mixture: bool, k: usize) -> Self {
        present.sort_unstable();
        present.dedup();
        let mixture = mixture && present.len() < k;
        Self { present, mixture }
    }

    /// Every category for k objects in report order: all present; mixture
    /// rows by growing present set; missing rows by growing present set; none.
    pub fn all(k: usize) -> Vec<Self> {
        let subsets_of_size = |size: usize| -> Vec<Vec<usize>> {
            let mut out: Vec<Vec<usize>> = (0u32..1 << k)
                .filter(|m| m.count_ones() as usize == size)
                .map(|m| (0..k).filter(|&i| m & (1 << i) != 0).collect())
                .collect();
            out.sort();
            out
        };
        let mut cats = vec![Self { present: (0..k).collect(), mixture: false }];
        for size in 0..k {
            cats.extend(subsets_of_size(size).into_iter().map(|present| Self { present, mixture: true }));
        }
        for size in 1..k {
            cats.extend(subsets_of_size(size).into_iter().map(|present| Self { present, mixture: false }));
        }
        cats.push(Self { present: vec![], mixture: false });
        cats
    }

    pub fn label(&self, k: usize) -> String {
        let names: Vec<String> = self.present.iter().map(|i| format!("obj{}", i + 1)).collect();
        match (self.present.len(), self.mixture) {
            (n, false) if n == k => format!("{k} objects exist"),
            (0, true) => "only mixture".into(),
            (_, true) => format!("{} + mixture", names.join(" + ")),
            (0, false) => "no target object".into(),
            (1, false) => format!("only {} exist", names[0]),
            (_, false) => format!("{} exist", names.join(" + ")),
        }
    }

    /// Some prompted object is absent and no mixture was detected.
    pub fn is_missing(&self, k: usize) -> bool {
        !self.mixture && self.present.len() < k
    }
}

pub fn classify_image(rec: &DetectionRecord, cfg: &EvalConfig) -> Result<OutcomeCategory> {
    cfg.validate()?;
    let labels = rec.label_indices()?;
    let dets = &rec.detections;
    let mut in_mixture = vec![false; dets.len()];
    for a in 0..dets.len() {
        if dets[a].score < cfg.mixture_conf {
            continue;
        }
        for b in a + 1..dets.len() {
            if labels[a] == labels[b] || dets[b].score < cfg.mixture_conf {
                continue;
            }
            if box_overlap(&dets[a].bbox, &dets[b].bbox, cfg.measure)? > cfg.overlap_threshold {
                in_mixture[a] = true;
                in_mixture[b] = true;
            }
        }
    }
    let mixture = in_mixture.iter().any(|&m| m);
    let present = (0..dets.len())
        .filter(|&d| !in_mixture[d] && dets[d].score >= cfg.single_conf)
        .map(|d| labels[d])
        .collect();
    Ok(OutcomeCategory::canonical(present, mixture, rec.k()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTally {
    pub k: usize,
    pub categories: Vec<OutcomeCategory>,
    pub counts: Vec<usize>,
}

impl CategoryTally {
    pub fn new(k: usize) -> Self {
        let categories = OutcomeCategory::all(k);
        let counts = vec![0; categories.len()];
        Self { k, categories, counts }
    }

    /// Tally with counts given in report order.
    pub fn from_counts(k: usize, counts: Vec<usize>) -> Result<Self> {
        let mut t = Self::new(k);
        if counts.len() != t.counts.len() {
            return Err(Error::Shape(format!("{} counts for {} categories", counts.len(), t.counts.len())));
        }
        t.counts = counts;
        Ok(t)
    }

    fn position(&self, cat: &OutcomeCategory) -> usize {
        self.categories.iter().position(|c| c == cat).expect("canonical categories are enumerated")
    }

    pub fn add(&mut self, cat: &OutcomeCategory) {
        let i = self.position(cat);
        self.counts[i] += 1;
    }

    pub fn count(&self, cat: &OutcomeCategory) -> usize {
        self.counts[self.position(cat)]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Images where object `a` is the only prompted object found.
    pub fn only(&self, a: usize) -> usize {
        self.count(&OutcomeCategory { present: vec![a], mixture: false })
    }

    pub fn percent(&self, count: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => (count as f64 * 100.0) / t as f64,
        }
    }

    pub fn mixture_sum(&self) -> usize {
        self.categories.iter().zip(&self.counts).filter(|(c, _)| c.mixture).map(|(_, n)| n).sum()
    }

    pub fn missing_sum(&self) -> usize {
        self.categories.iter().zip(&self.counts).filter(|(c, _)| c.is_missing(self.k)).map(|(_, n)| n).sum()
    }
}

/// Ratio of "only a" to "only b" images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoBias {
    pub a: usize,
    pub b: usize,
    pub only_a: usize,
    pub only_b: usize,
}

impl InfoBias {
    pub fn is_defined(&self) -> bool {
        self.only_b > 0
    }

    /// The ratio; `+inf` when the denominator is zero (check [`Self::is_defined`]).
    pub fn ratio(&self) -> f64 {
        if self.only_b == 0 {
            f64::INFINITY
        } else {
            self.only_a as f64 / self.only_b as f64
        }
    }
}

pub fn info_bias(tally: &CategoryTally, a: usize, b: usize) -> InfoBias {
    InfoBias { a, b, only_a: tally.only(a), only_b: tally.only(b) }
}

/// Reduction in distance from the balanced ratio 1, in percent:
/// `(|before − 1| − |after − 1|) · 100`.
pub fn balance_improvement(bias_before: f64, bias_after: f64) -> f64 {
    ((bias_before - 1.0).abs() - (bias_after - 1.0).abs()) * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidEntry {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub pair: String,
    pub only_a: usize,
    pub only_b: usize,
    /// `None` when the denominator is zero.
    pub ratio: Option<f64>,
    pub undefined: bool,
}

impl From<InfoBias> for BiasRow {
    fn from(b: InfoBias) -> Self {
        Self {
            pair: format!("obj{}, obj{}", b.a + 1, b.b + 1),
            only_a: b.only_a,
            only_b: b.only_b,
            ratio: b.is_defined().then(|| b.ratio()),
            undefined: !b.is_defined(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: EvalConfig,
    pub k: usize,
    pub records: usize,
    pub valid: usize,
    pub invalid: Vec<InvalidEntry>,
    pub tally: CategoryTally,
    pub rows: Vec<CategoryRow>,
    pub mixture_sum: CategoryRow,
    pub missing_sum: CategoryRow,
    pub info_bias: Vec<BiasRow>,
}

impl RunReport {
    fn build(config: EvalConfig, tally: CategoryTally, invalid: Vec<InvalidEntry>) -> Self {
        let k = tally.k;
        let row = |category: String, count: usize| CategoryRow { category, count, percent: tally.percent(count) };
        let rows = tally.categories.iter().zip(&tally.counts).map(|(c, &n)| row(c.label(k), n)).collect();
        let mut info = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                info.push(info_bias(&tally, a, b).into());
            }
        }
        Self {
            config,
            k,
            records: tally.total() + invalid.len(),
            valid: tally.total(),
            mixture_sum: row("mixture sum".into(), tally.mixture_sum()),
            missing_sum: row("missing sum".into(), tally.missing_sum()),
            rows,
            info_bias: info,
            invalid,
            tally,
        }
    }

    /// Account for lines that could not be parsed into records at all.
    pub fn add_unparsed(&mut self, entries: Vec<InvalidEntry>) {
        self.records += entries.len();
        self.invalid.extend(entries);
    }

    /// Markdown table in report order, with the mixture and missing sums
    /// after their groups.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "<!-- overlap > {} ({}), single_conf >= {}, mixture_conf >= {} -->",
            c.overlap_threshold, c.measure, c.single_conf, c.mixture_conf
        );
        let _ = writeln!(s, "| Category | Count | Percent |");
        let _ = writeln!(s, "|---|---:|---:|");
        for line in self.table_lines() {
            let _ = writeln!(s, "| {} | {} | {:.2}% |", line.category, line.count, line.percent);
        }
        for b in &self.info_bias {
            let v = b.ratio.map_or_else(|| "undefined".to_string(), |r| format!("{r:.2}"));
            let _ = writeln!(s, "| Info bias ({}) | {}/{} | {} |", b.pair, b.only_a, b.only_b, v);
        }
        let _ = writeln!(s, "\nValid records: {} of {}", self.valid, self.records);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,count,percent\n");
        for line in self.table_lines() {
            let _ = writeln!(s, "{},{},{:.4}", line.category, line.count, line.percent);
        }
        for b in &self.info_bias {
            let v = b.ratio.map_or_else(String::new, |r| format!("{r:.6}"));
            let _ = writeln!(s, "\"info bias ({})\",,{v}", b.pair);
        }
        s
    }

    fn table_lines(&self) -> Vec<&CategoryRow> {
        let k = self.k;
        let cats = &self.tally.categories;
        let mut out = Vec::with_capacity(self.rows.len() + 2);
        for (i, r) in self.rows.iter().enumerate() {
            out.push(r);
            let next_mix = cats.get(i + 1).map(|c| c.mixture);
            if cats[i].mixture && next_mix != Some(true) {
                out.push(&self.mixture_sum);
            }
            if cats[i].is_missing(k) && cats.get(i + 1).is_none_or(|c| !c.is_missing(k)) {
                out.push(&self.missing_sum);
            }
        }
        out
    }
}

/// Classify every record and aggregate. All records must share one k;
/// records that fail validation are counted as invalid.
pub fn tally_run(records: &[DetectionRecord], cfg: &EvalConfig) -> Result<RunReport> {
    cfg.validate()?;
    let k = records.first().map_or(2, DetectionRecord::k);
    let offenders: Vec<String> = records.iter().filter(|r| r.k() != k).map(|r| r.image_id.clone()).collect();
    if !offenders.is_empty() {
        return Err(Error::MixedObjectCount { expected: k, offenders });
    }
    let outcomes: Vec<Result<OutcomeCategory>> = records.par_iter().map(|r| classify_image(r, cfg)).collect();
    let mut invalid = Vec::new();
    let mut tally = CategoryTally::new(k);
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(cat) => tally.add(&cat),
            Err(Error::InvalidRecord { reason, .. }) => {
                invalid.push(InvalidEntry { image_id: rec.image_id.clone(), reason })
            }
            Err(other) => {
                invalid.push(InvalidEntry { image_id: rec.image_id.clone(), reason: other.to_string() })
            }
        }
    }
    Ok(RunReport::build(*cfg, tally, invalid))
}

/// Parse JSON Lines; unparsable lines come back as invalid entries.
pub fn parse_detections(text: &str) -> (Vec<DetectionRecord>, Vec<InvalidEntry>) {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match serde_json::from_str::<DetectionRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => bad.push(InvalidEntry { image_id: format!("line {}", lineno + 1), reason: e.to_string() }),
        }
    }
    (records, bad)
}

pub fn read_detections(path: &Path) -> Result<(Vec<DetectionRecord>, Vec<InvalidEntry>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_detections(&text))
}

pub fn write_detections(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-pair bias before and after, with the balance improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceComparison {
    pub pair: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    pub improvement_percent: Option<f64>,
}

pub fn compare_runs(before: &RunReport, after: &RunReport) -> Result<Vec<BalanceComparison>> {
    if before.k != after.k {
        return Err(Error::MixedObjectCount { expected: before.k, offenders: vec![format!("k = {}", after.k)] });
    }
    Ok(before
        .info_bias
        .iter()
        .zip(&after.info_bias)
        .map(|(b, a)| BalanceComparison {
            pair: b.pair.clone(),
            before: b.ratio,
            after: a.ratio,
            improvement_percent: b.ratio.zip(a.ratio).map(|(x, y)| balance_improvement(x, y)),
        })
        .collect())
}
