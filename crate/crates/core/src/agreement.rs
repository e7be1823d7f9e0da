//! Rank agreement between explanations: Kendall τ per instance, pairwise
//! method matrices with exclusion flags, and aggregate means.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{Explanation, MethodId};
use crate::data::TaskType;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("score vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least 2 scores to rank, got {0}")]
    TooShort(usize),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("no {method} explanation for instance `{instance}`")]
    Missing { instance: String, method: MethodId },
    #[error("duplicate {method} explanation for instance `{instance}`")]
    Duplicate { instance: String, method: MethodId },
    #[error("instance `{instance}`: {a} ranks {na} tokens but {b} ranks {nb}")]
    TokenMismatch {
        instance: String,
        a: MethodId,
        na: usize,
        b: MethodId,
        nb: usize,
    },
    #[error("need at least 2 methods, got {0}")]
    TooFewMethods(usize),
    #[error("no matrices to summarize")]
    NoMatrices,
    #[error("group `{0}` has no included cells with values")]
    EmptyGroup(String),
    #[error("{dataset}/{model}: cells do not follow the method order")]
    Inconsistent { dataset: String, model: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauVariant {
    /// Tie-corrected.
    #[default]
    B,
    A,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    #[default]
    Signed,
    /// Rank by magnitude, ignoring sign.
    Absolute,
}

/// Pair counts for `n` observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PairCounts {
    total: u64,
    tied_x: u64,
    tied_y: u64,
    /// `C − D`.
    score: i64,
}

fn tie_pairs(run: u64) -> u64 {
    run * (run - 1) / 2
}

/// Counts inversions (strictly decreasing pairs) while sorting `v`.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (lo, hi) = v.split_at_mut(mid);
    let mut swaps = merge_count(lo, &mut buf[..mid]) + merge_count(hi, &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < lo.len() && j < hi.len() {
        if hi[j] < lo[i] {
            buf[k] = hi[j];
            swaps += (lo.len() - i) as u64;
            j += 1;
        } else {
            buf[k] = lo[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + lo.len() - i].copy_from_slice(&lo[i..]);
    k += lo.len() - i;
    buf[k..].copy_from_slice(&hi[j..]);
    v.copy_from_slice(buf);
    swaps
}

fn runs<T: PartialEq>(v: &[T]) -> impl Iterator<Item = u64> + '_ {
    v.chunk_by(|a, b| a == b).map(|c| c.len() as u64)
}

/// Knight's O(n log n) pair counting.
fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let n = x.len() as u64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(y[i].total_cmp(&y[j])));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let xy: Vec<(f64, f64)> = order.iter().map(|&i| (x[i], y[i])).collect();
    let tied_x: u64 = runs(&xs).map(tie_pairs).sum();
    let tied_xy: u64 = runs(&xy).map(tie_pairs).sum();
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; ys.len()];
    let discordant = merge_count(&mut ys, &mut buf);
    let tied_y: u64 = runs(&ys).map(tie_pairs).sum();
    let total = tie_pairs(n);
    let score = total as i64 - tied_x as i64 - tied_y as i64 + tied_xy as i64 - 2 * discordant as i64;
    PairCounts {
        total,
        tied_x,
        tied_y,
        score,
    }
}

fn prepare(x: &[f64], y: &[f64], mode: RankMode) -> Result<(Vec<f64>, Vec<f64>), AgreementError> {
    if x.len() != y.len() {
        return Err(AgreementError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AgreementError::TooShort(x.len()));
    }
    if let Some(i) = x.iter().zip(y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(AgreementError::NonFinite(i));
    }
    // +0.0 so that -0.0 and 0.0 tie under total_cmp
    let map = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&s| match mode {
                RankMode::Signed => s + 0.0,
                RankMode::Absolute => s.abs(),
            })
            .collect()
    };
    Ok((map(x), map(y)))
}

/// Kendall τ between two score vectors. `Ok(None)` means τ is undefined
/// because one vector is fully tied (τ-b only).
pub fn kendall_tau(x: &[f64], y: &[f64], variant: TauVariant, mode: RankMode) -> Result<Option<f64>, AgreementError> {
    let (x, y) = prepare(x, y, mode)?;
    let c = pair_counts(&x, &y);
    Ok(match variant {
        TauVariant::A => Some(c.score as f64 / c.total as f64),
        TauVariant::B => {
            let (dx, dy) = (c.total - c.tied_x, c.total - c.tied_y);
            if dx == 0 || dy == 0 {
                None
            } else {
                Some(c.score as f64 / (dx as f64 * dy as f64).sqrt())
            }
        }
    })
}

/// Tie-corrected τ on signed scores.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>, AgreementError> {
    kendall_tau(x, y, TauVariant::B, RankMode::Signed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub a: MethodId,
    pub b: MethodId,
    /// `None` when every instance was skipped.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    /// Instances where τ was undefined.
    pub skipped: usize,
    pub excluded: bool,
}

impl AgreementCell {
    pub fn involves_attention(&self) -> bool {
        self.a.is_attention() || self.b.is_attention()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub dataset: String,
    pub model: String,
    pub task_type: TaskType,
    pub methods: Vec<MethodId>,
    /// One cell per pair `(methods[i], methods[j])`, `i < j`, row-major.
    pub cells: Vec<AgreementCell>,
}

impl AgreementMatrix {
    /// Builds a matrix from precomputed cell means, e.g. published tables.
    /// `means` lists the cells in the same order as [`AgreementMatrix::cells`].
    pub fn from_means(
        dataset: &str,
        model: &str,
        task_type: TaskType,
        methods: &[MethodId],
        means: &[f64],
        exclusions: &[(MethodId, MethodId)],
    ) -> Result<Self, AgreementError> {
        let pairs = method_pairs(methods)?;
        if pairs.len() != means.len() {
            return Err(AgreementError::Length(pairs.len(), means.len()));
        }
        Ok(Self {
            dataset: dataset.into(),
            model: model.into(),
            task_type,
            methods: methods.to_vec(),
            cells: pairs
                .into_iter()
                .zip(means)
                .map(|((a, b), &m)| AgreementCell {
                    a,
                    b,
                    mean: Some(m),
                    std: None,
                    count: 0,
                    skipped: 0,
                    excluded: is_excluded(a, b, exclusions),
                })
                .collect(),
        })
    }

    /// The cell for positions `i < j` of the method list.
    pub fn cell_at(&self, i: usize, j: usize) -> Option<&AgreementCell> {
        let k = self.methods.len();
        (i < j && j < k).then(|| &self.cells[i * (2 * k - i - 1) / 2 + (j - i - 1)])
    }

    /// The first cell for an unordered pair.
    pub fn cell(&self, a: MethodId, b: MethodId) -> Option<&AgreementCell> {
        self.cells.iter().find(|c| (c.a, c.b) == (a, b) || (c.a, c.b) == (b, a))
    }
}

pub const DEFAULT_EXCLUSIONS: [(MethodId, MethodId); 2] = [
    (MethodId::IntegratedGradients, MethodId::GradShap),
    (MethodId::Deeplift, MethodId::DeepShap),
];

fn is_excluded(a: MethodId, b: MethodId, exclusions: &[(MethodId, MethodId)]) -> bool {
    exclusions.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
}

fn method_pairs(methods: &[MethodId]) -> Result<Vec<(MethodId, MethodId)>, AgreementError> {
    if methods.len() < 2 {
        return Err(AgreementError::TooFewMethods(methods.len()));
    }
    let mut out = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            out.push((methods[i], methods[j]));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementOptions {
    pub variant: TauVariant,
    pub rank: RankMode,
    pub exclusions: Vec<(MethodId, MethodId)>,
}

impl Default for AgreementOptions {
    fn default() -> Self {
        Self {
            variant: TauVariant::B,
            rank: RankMode::Signed,
            exclusions: DEFAULT_EXCLUSIONS.to_vec(),
        }
    }
}

/// Identifies the experiment a matrix belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixLabel {
    pub dataset: String,
    pub model: String,
    pub task_type: TaskType,
}

/// Mean taken relative to the first value, so identical values average to
/// exactly that value.
fn mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = mean(values);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Mean and population std of per-instance τ for every method pair.
pub fn agreement_matrix(
    records: &[Explanation],
    methods: &[MethodId],
    options: &AgreementOptions,
    label: &MatrixLabel,
) -> Result<AgreementMatrix, AgreementError> {
    let pairs = method_pairs(methods)?;
    let mut instances: Vec<&str> = Vec::new();
    let mut by_key: HashMap<(&str, MethodId), &Explanation> = HashMap::new();
    for r in records.iter().filter(|r| methods.contains(&r.method)) {
        if by_key.insert((r.instance_id.as_str(), r.method), r).is_some() {
            return Err(AgreementError::Duplicate {
                instance: r.instance_id.clone(),
                method: r.method,
            });
        }
        if !instances.contains(&r.instance_id.as_str()) {
            instances.push(&r.instance_id);
        }
    }
    let mut table: Vec<Vec<&Explanation>> = Vec::with_capacity(instances.len());
    for &id in &instances {
        let mut row = Vec::with_capacity(methods.len());
        for &m in methods {
            let e = by_key.get(&(id, m)).ok_or_else(|| AgreementError::Missing {
                instance: id.into(),
                method: m,
            })?;
            if let Some(first) = row.first().copied().filter(|f: &&Explanation| f.tokens != e.tokens) {
                return Err(AgreementError::TokenMismatch {
                    instance: id.into(),
                    a: first.method,
                    na: first.tokens.len(),
                    b: m,
                    nb: e.tokens.len(),
                });
            }
            row.push(*e);
        }
        table.push(row);
    }
    let index = |m: MethodId| methods.iter().position(|&x| x == m).expect("listed method");
    let cells: Result<Vec<AgreementCell>, AgreementError> = pairs
        .iter()
        .map(|&(a, b)| {
            let (ia, ib) = (index(a), index(b));
            let taus: Vec<Option<f64>> = table
                .par_iter()
                .map(|row| match kendall_tau(&row[ia].scores, &row[ib].scores, options.variant, options.rank) {
                    Err(AgreementError::TooShort(_)) => Ok(None),
                    other => other,
                })
                .collect::<Result<_, _>>()?;
            let values: Vec<f64> = taus.iter().flatten().copied().collect();
            let skipped = taus.len() - values.len();
            if skipped > 0 {
                log::info!(
                    "{}/{}: skipped {skipped} of {} instances for {a} vs {b} (tied or too short)",
                    label.dataset,
                    label.model,
                    taus.len()
                );
            }
            let (mean, std) = mean_std(&values);
            Ok(AgreementCell {
                a,
                b,
                mean,
                std,
                count: values.len(),
                skipped,
                excluded: is_excluded(a, b, &options.exclusions),
            })
        })
        .collect();
    Ok(AgreementMatrix {
        dataset: label.dataset.clone(),
        model: label.model.clone(),
        task_type: label.task_type,
        methods: methods.to_vec(),
        cells: cells?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    Overall,
    ByModel,
    /// Per task type, each model weighted equally and, within a model, the
    /// attention and non-attention cells weighted equally (for
    /// [`Scope::All`]).
    ByTaskType,
    /// Two groups, attention cells and the rest; the scope is ignored.
    AttentionVsRest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    All,
    Attention,
    NonAttention,
}

impl Scope {
    fn admits(self, c: &AgreementCell) -> bool {
        match self {
            Scope::All => true,
            Scope::Attention => c.involves_attention(),
            Scope::NonAttention => !c.involves_attention(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub grouping: Grouping,
    pub scope: Scope,
    pub group: String,
    pub mean: f64,
    pub cells: usize,
}

fn included<'a>(matrices: &[&'a AgreementMatrix], scope: Scope) -> Vec<&'a AgreementCell> {
    matrices
        .iter()
        .flat_map(|m| &m.cells)
        .filter(|c| !c.excluded && c.mean.is_some() && scope.admits(c))
        .collect()
}

fn flat_mean(cells: &[&AgreementCell], group: &str) -> Result<f64, AgreementError> {
    if cells.is_empty() {
        return Err(AgreementError::EmptyGroup(group.into()));
    }
    let values: Vec<f64> = cells.iter().map(|c| c.mean.expect("filtered")).collect();
    Ok(mean(&values))
}

fn task_name(t: TaskType) -> &'static str {
    match t {
        TaskType::Single => "single",
        TaskType::Pair => "pair",
    }
}

/// Unweighted means of included cell means, one [`Summary`] per group.
pub fn summarize(matrices: &[AgreementMatrix], grouping: Grouping, scope: Scope) -> Result<Vec<Summary>, AgreementError> {
    if matrices.is_empty() {
        return Err(AgreementError::NoMatrices);
    }
    let all: Vec<&AgreementMatrix> = matrices.iter().collect();
    let summary = |group: String, scope: Scope, mean: f64, cells: usize| Summary {
        grouping,
        scope,
        group,
        mean,
        cells,
    };
    let flat = |ms: &[&AgreementMatrix], group: String, scope: Scope| -> Result<Summary, AgreementError> {
        let cells = included(ms, scope);
        let mean = flat_mean(&cells, &group)?;
        Ok(summary(group, scope, mean, cells.len()))
    };
    match grouping {
        Grouping::Overall => Ok(vec![flat(&all, "all".into(), scope)?]),
        Grouping::AttentionVsRest => Ok(vec![
            flat(&all, "attention".into(), Scope::Attention)?,
            flat(&all, "non-attention".into(), Scope::NonAttention)?,
        ]),
        Grouping::ByModel => {
            let mut groups: BTreeMap<&str, Vec<&AgreementMatrix>> = BTreeMap::new();
            for m in &all {
                groups.entry(&m.model).or_default().push(m);
            }
            groups.into_iter().map(|(k, ms)| flat(&ms, k.into(), scope)).collect()
        }
        Grouping::ByTaskType => {
            let mut groups: BTreeMap<TaskType, BTreeMap<&str, Vec<&AgreementMatrix>>> = BTreeMap::new();
            for m in &all {
                groups.entry(m.task_type).or_default().entry(&m.model).or_default().push(m);
            }
            let parts: &[Scope] = match scope {
                Scope::All => &[Scope::Attention, Scope::NonAttention],
                s => &[s],
            };
            groups
                .into_iter()
                .map(|(t, models)| {
                    let group = task_name(t).to_string();
                    let mut per_model = Vec::new();
                    let mut count = 0;
                    for ms in models.values() {
                        let mut means = Vec::new();
                        for &p in parts {
                            let cells = included(ms, p);
                            if !cells.is_empty() {
                                count += cells.len();
                                means.push(flat_mean(&cells, &group)?);
                            }
                        }
                        if !means.is_empty() {
                            per_model.push(mean(&means));
                        }
                    }
                    if per_model.is_empty() {
                        return Err(AgreementError::EmptyGroup(group));
                    }
                    Ok(summary(group, scope, mean(&per_model), count))
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown report format `{s}` (expected markdown, csv or json)")),
        }
    }
}

/// Everything a report shows; the JSON format is this, serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub matrices: Vec<AgreementMatrix>,
    pub summaries: Vec<Summary>,
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::All => "all",
        Scope::Attention => "attention",
        Scope::NonAttention => "non-attention",
    }
}

fn markdown(report: &Report) -> String {
    let mut out = String::from("# Explanation agreement (mean Kendall τ)\n");
    for m in &report.matrices {
        let _ = write!(out, "\n## {} / {} ({})\n\n|", m.dataset, m.model, task_name(m.task_type));
        let cols = &m.methods[..m.methods.len() - 1];
        for c in cols {
            let _ = write!(out, " | {}", c.label());
        }
        out.push_str(" |\n|---");
        out.push_str(&"|---:".repeat(cols.len()));
        out.push_str("|\n");
        for (i, row) in m.methods.iter().enumerate().skip(1) {
            let _ = write!(out, "| {}", row.label());
            for j in 0..cols.len() {
                let text = if j < i {
                    let c = m.cell_at(j, i).expect("complete matrix");
                    let v = fmt4(c.mean);
                    if c.excluded {
                        format!("({v})")
                    } else {
                        v
                    }
                } else {
                    String::new()
                };
                let _ = write!(out, " | {text}");
            }
            out.push_str(" |\n");
        }
    }
    if report.matrices.iter().any(|m| m.cells.iter().any(|c| c.excluded)) {
        out.push_str("\nParenthesized cells are excluded from aggregates.\n");
    }
    if !report.summaries.is_empty() {
        out.push_str("\n## Aggregates\n\n| grouping | scope | group | mean | cells |\n|---|---|---|---:|---:|\n");
        for s in &report.summaries {
            let grouping = serde_json::to_value(s.grouping).expect("enum");
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.4} | {} |",
                grouping.as_str().unwrap_or_default(),
                scope_name(s.scope),
                s.group,
                s.mean,
                s.cells
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv(report: &Report) -> String {
    let mut out = String::from("dataset,model,task_type,method_a,method_b,mean,std,count,skipped,excluded\n");
    for m in &report.matrices {
        for c in &m.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&m.dataset),
                csv_field(&m.model),
                task_name(m.task_type),
                c.a,
                c.b,
                c.mean.map_or(String::new(), |v| format!("{v:.4}")),
                c.std.map_or(String::new(), |v| format!("{v:.4}")),
                c.count,
                c.skipped,
                c.excluded
            );
        }
    }
    if !report.summaries.is_empty() {
        out.push_str("\ngrouping,scope,group,mean,cells\n");
        for s in &report.summaries {
            let grouping = serde_json::to_value(s.grouping).expect("enum");
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{}",
                grouping.as_str().unwrap_or_default(),
                scope_name(s.scope),
                csv_field(&s.group),
                s.mean,
                s.cells
            );
        }
    }
    out
}

pub fn render_report(report: &Report, format: ReportFormat) -> Result<String, AgreementError> {
    for m in &report.matrices {
        let pairs = method_pairs(&m.methods)?;
        if pairs.len() != m.cells.len() || pairs.iter().zip(&m.cells).any(|(&p, c)| p != (c.a, c.b)) {
            return Err(AgreementError::Inconsistent {
                dataset: m.dataset.clone(),
                model: m.model.clone(),
            });
        }
    }
    Ok(match format {
        ReportFormat::Markdown => markdown(report),
        ReportFormat::Csv => csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    })
}
