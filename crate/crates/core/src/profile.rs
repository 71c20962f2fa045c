//! Calling-context-tree profiles: JSON import/export, hotspot extraction,
//! compact text summaries for the model, and metric diffs between runs.
//!
//! Document format (`"schema": "cct-v1"`):
//!
//! ```json
//! {
//!   "schema": "cct-v1",
//!   "metrics": [
//!     {"id": "time_incl", "unit": "s", "kind": "inclusive"},
//!     {"id": "time_excl", "unit": "s", "kind": "exclusive", "pair": "time_incl"}
//!   ],
//!   "roots": [
//!     {"frame": {"fn": "main", "file": "cg.c", "line": 10},
//!      "metrics": {"time_incl": 25.0, "time_excl": 2.0},
//!      "children": []}
//!   ],
//!   "totals": {"time_excl": 25.0}
//! }
//! ```
//!
//! An exclusive metric without `pair` is paired with an inclusive metric of
//! the same stem (`x_excl` with `x_incl`). `totals` is optional; missing
//! entries are computed (sum over all nodes for exclusive metrics, sum over
//! roots for inclusive ones).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const SCHEMA: &str = "cct-v1";
pub const TRUNCATION_MARKER: &str = "[...truncated]";
const REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("negative value for `{metric}` at {path}")]
    NegativeMetric { path: String, metric: String },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("metric `{0}` is not exclusive")]
    NotExclusive(String),
    #[error("metric `{0}` has zero total")]
    ZeroTotal(String),
    #[error("profiler failed: {0}")]
    ProfilerFailed(String),
    #[error("no node at `{0}`")]
    NodeNotFound(String),
}

fn violation(path: &str, reason: impl Into<String>) -> ProfileError {
    ProfileError::SchemaViolation { path: path.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Inclusive,
    Exclusive,
    Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInfo {
    pub unit: String,
    pub kind: MetricKind,
    /// Inclusive counterpart of an exclusive metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "fn")]
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
}

impl Frame {
    pub fn location(&self) -> String {
        match (&self.file, self.line) {
            (Some(f), Some(l)) => format!("{f}:{l}"),
            (Some(f), None) => f.clone(),
            (None, Some(l)) => format!("?:{l}"),
            (None, None) => "?".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileNode {
    pub frame: Frame,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub children: Vec<ProfileNode>,
}

impl ProfileNode {
    fn visit<'a>(&'a self, chain: &mut Vec<&'a ProfileNode>, f: &mut dyn FnMut(&[&'a ProfileNode])) {
        chain.push(self);
        f(chain);
        for c in &self.children {
            c.visit(chain, f);
        }
        chain.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTree {
    pub roots: Vec<ProfileNode>,
    pub metric_catalog: BTreeMap<String, MetricInfo>,
    pub total: BTreeMap<String, f64>,
}

impl ProfileTree {
    /// Calls `f` with the frame chain of every node, in depth-first pre-order.
    pub fn walk<'a>(&'a self, mut f: impl FnMut(&[&'a ProfileNode])) {
        let mut chain = Vec::new();
        for r in &self.roots {
            r.visit(&mut chain, &mut f);
        }
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.walk(|_| n += 1);
        n
    }

    /// Sum of `metric` over every node.
    pub fn node_sum(&self, metric: &str) -> f64 {
        let mut s = 0.0;
        self.walk(|chain| s += chain.last().and_then(|n| n.metrics.get(metric)).copied().unwrap_or(0.0));
        s
    }

    /// Follows `path` (function names from a root) and returns the node.
    pub fn find(&self, path: &[&str]) -> Option<&ProfileNode> {
        let (first, rest) = path.split_first()?;
        let mut node = self.roots.iter().find(|n| n.frame.function == *first)?;
        for name in rest {
            node = node.children.iter().find(|n| n.frame.function == *name)?;
        }
        Some(node)
    }

    pub fn to_json(&self) -> String {
        let metrics: Vec<Value> = self
            .metric_catalog
            .iter()
            .map(|(id, info)| {
                let mut m = Map::new();
                m.insert("id".into(), Value::from(id.as_str()));
                m.insert("unit".into(), Value::from(info.unit.as_str()));
                m.insert("kind".into(), serde_json::to_value(info.kind).expect("kind serializes"));
                if let Some(p) = &info.pair {
                    m.insert("pair".into(), Value::from(p.as_str()));
                }
                Value::Object(m)
            })
            .collect();
        let doc = serde_json::json!({
            "schema": SCHEMA,
            "metrics": metrics,
            "roots": self.roots,
            "totals": self.total,
        });
        serde_json::to_string_pretty(&doc).expect("profile serializes")
    }
}

/// Converts some profiler's output into a [`ProfileTree`].
pub trait ProfileImporter {
    fn import(&self, document: &[u8]) -> Result<ProfileTree, ProfileError>;
}

/// Importer for the native `cct-v1` JSON format.
#[derive(Debug, Clone, Copy, Default)]
pub struct CctJsonImporter;

impl ProfileImporter for CctJsonImporter {
    fn import(&self, document: &[u8]) -> Result<ProfileTree, ProfileError> {
        import_profile(document)
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ProfileError> {
    v.as_object().ok_or_else(|| violation(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ProfileError> {
    v.as_array().ok_or_else(|| violation(path, "expected an array"))
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), ProfileError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(violation(path, format!("unexpected field `{k}`"))),
        None => Ok(()),
    }
}

fn parse_catalog(v: &Value) -> Result<BTreeMap<String, MetricInfo>, ProfileError> {
    let mut catalog = BTreeMap::new();
    for (i, m) in as_array(v, "$.metrics")?.iter().enumerate() {
        let path = format!("$.metrics[{i}]");
        let obj = as_object(m, &path)?;
        check_keys(obj, &path, &["id", "unit", "kind", "pair"])?;
        let id = obj
            .get("id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| violation(&format!("{path}.id"), "expected a non-empty string"))?;
        let unit = match obj.get("unit") {
            None => String::new(),
            Some(u) => u.as_str().ok_or_else(|| violation(&format!("{path}.unit"), "expected a string"))?.to_string(),
        };
        let kind: MetricKind = obj
            .get("kind")
            .and_then(|k| serde_json::from_value(k.clone()).ok())
            .ok_or_else(|| violation(&format!("{path}.kind"), "expected inclusive, exclusive or rate"))?;
        let pair = match obj.get("pair") {
            None | Some(Value::Null) => None,
            Some(p) => Some(p.as_str().ok_or_else(|| violation(&format!("{path}.pair"), "expected a string"))?.to_string()),
        };
        if catalog.insert(id.to_string(), MetricInfo { unit, kind, pair }).is_some() {
            return Err(violation(&format!("{path}.id"), format!("duplicate metric `{id}`")));
        }
    }
    for (id, info) in &catalog {
        if let Some(p) = &info.pair {
            match catalog.get(p) {
                Some(other) if info.kind == MetricKind::Exclusive && other.kind == MetricKind::Inclusive => {}
                _ => return Err(violation("$.metrics", format!("`{id}` pairs with `{p}`, which is not its inclusive counterpart"))),
            }
        }
    }
    Ok(catalog)
}

/// Exclusive/inclusive pairs used for the `excl <= incl` check.
fn metric_pairs(catalog: &BTreeMap<String, MetricInfo>) -> Vec<(String, String)> {
    catalog
        .iter()
        .filter(|(_, i)| i.kind == MetricKind::Exclusive)
        .filter_map(|(id, info)| {
            let incl = info.pair.clone().or_else(|| {
                let stem = id.strip_suffix("_excl")?;
                let candidate = format!("{stem}_incl");
                (catalog.get(&candidate)?.kind == MetricKind::Inclusive).then_some(candidate)
            })?;
            Some((id.clone(), incl))
        })
        .collect()
}

fn exceeds(a: f64, b: f64) -> bool {
    a > b + REL_EPS * b.abs().max(a.abs()) + f64::MIN_POSITIVE
}

struct NodeCtx<'a> {
    catalog: &'a BTreeMap<String, MetricInfo>,
    pairs: &'a [(String, String)],
}

fn parse_node(
    v: &Value,
    path: &str,
    ctx: &NodeCtx<'_>,
    parent: Option<&BTreeMap<String, f64>>,
) -> Result<ProfileNode, ProfileError> {
    let obj = as_object(v, path)?;
    check_keys(obj, path, &["frame", "metrics", "children"])?;
    let frame_path = format!("{path}.frame");
    let fobj = as_object(obj.get("frame").ok_or_else(|| violation(path, "missing frame"))?, &frame_path)?;
    check_keys(fobj, &frame_path, &["fn", "file", "line"])?;
    let function = fobj
        .get("fn")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| violation(&format!("{frame_path}.fn"), "expected a non-empty string"))?
        .to_string();
    let file = match fobj.get("file") {
        None | Some(Value::Null) => None,
        Some(f) => Some(f.as_str().ok_or_else(|| violation(&format!("{frame_path}.file"), "expected a string"))?.to_string()),
    };
    let line = match fobj.get("line") {
        None | Some(Value::Null) => None,
        Some(l) => Some(l.as_u64().ok_or_else(|| violation(&format!("{frame_path}.line"), "expected a non-negative integer"))?),
    };

    let mut metrics = BTreeMap::new();
    if let Some(m) = obj.get("metrics") {
        let mpath = format!("{path}.metrics");
        for (id, value) in as_object(m, &mpath)? {
            let vpath = format!("{mpath}.{id}");
            if !ctx.catalog.contains_key(id) {
                return Err(violation(&vpath, "metric not declared in $.metrics"));
            }
            let x = value.as_f64().filter(|x| x.is_finite()).ok_or_else(|| violation(&vpath, "expected a finite number"))?;
            if x < 0.0 {
                return Err(ProfileError::NegativeMetric { path: vpath, metric: id.clone() });
            }
            metrics.insert(id.clone(), x);
        }
    }
    for (excl, incl) in ctx.pairs {
        if let (Some(e), Some(i)) = (metrics.get(excl), metrics.get(incl)) {
            if exceeds(*e, *i) {
                return Err(violation(&format!("{path}.metrics.{excl}"), format!("exclusive value exceeds `{incl}`")));
            }
        }
    }
    if let Some(parent) = parent {
        for (id, info) in ctx.catalog {
            if info.kind != MetricKind::Inclusive {
                continue;
            }
            if let (Some(c), Some(p)) = (metrics.get(id), parent.get(id)) {
                if exceeds(*c, *p) {
                    return Err(violation(&format!("{path}.metrics.{id}"), "child inclusive value exceeds its parent"));
                }
            }
        }
    }

    let mut children = Vec::new();
    if let Some(c) = obj.get("children") {
        let cpath = format!("{path}.children");
        for (i, child) in as_array(c, &cpath)?.iter().enumerate() {
            children.push(parse_node(child, &format!("{cpath}[{i}]"), ctx, Some(&metrics))?);
        }
    }
    Ok(ProfileNode { frame: Frame { function, file, line }, metrics, children })
}

/// Parses and validates a `cct-v1` document.
pub fn import_profile(document: &[u8]) -> Result<ProfileTree, ProfileError> {
    let doc: Value = serde_json::from_slice(document).map_err(|e| violation("$", e.to_string()))?;
    let obj = as_object(&doc, "$")?;
    check_keys(obj, "$", &["schema", "metrics", "roots", "totals"])?;
    match obj.get("schema").and_then(Value::as_str) {
        Some(SCHEMA) => {}
        _ => return Err(violation("$.schema", format!("expected \"{SCHEMA}\""))),
    }
    let catalog = parse_catalog(obj.get("metrics").ok_or_else(|| violation("$", "missing metrics"))?)?;
    let pairs = metric_pairs(&catalog);
    let ctx = NodeCtx { catalog: &catalog, pairs: &pairs };
    let mut roots = Vec::new();
    for (i, r) in as_array(obj.get("roots").ok_or_else(|| violation("$", "missing roots"))?, "$.roots")?.iter().enumerate() {
        roots.push(parse_node(r, &format!("$.roots[{i}]"), &ctx, None)?);
    }
    let mut tree = ProfileTree { roots, metric_catalog: catalog, total: BTreeMap::new() };

    let given: BTreeMap<String, f64> = match obj.get("totals") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(t) => {
            let mut out = BTreeMap::new();
            for (id, v) in as_object(t, "$.totals")? {
                let path = format!("$.totals.{id}");
                if !tree.metric_catalog.contains_key(id) {
                    return Err(violation(&path, "metric not declared in $.metrics"));
                }
                let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| violation(&path, "expected a finite number"))?;
                if x < 0.0 {
                    return Err(ProfileError::NegativeMetric { path, metric: id.clone() });
                }
                out.insert(id.clone(), x);
            }
            out
        }
    };
    for (id, info) in &tree.metric_catalog {
        let computed = match info.kind {
            MetricKind::Exclusive => Some(tree.node_sum(id)),
            MetricKind::Inclusive => Some(tree.roots.iter().filter_map(|r| r.metrics.get(id)).sum()),
            MetricKind::Rate => None,
        };
        let value = match (given.get(id), computed) {
            (Some(g), Some(c)) if info.kind == MetricKind::Exclusive => {
                if (g - c).abs() > REL_EPS * g.abs().max(c.abs()) {
                    return Err(violation(&format!("$.totals.{id}"), format!("total {g} differs from node sum {c}")));
                }
                *g
            }
            (Some(g), _) => *g,
            (None, Some(c)) => c,
            (None, None) => continue,
        };
        tree.total.insert(id.clone(), value);
    }
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotReport {
    /// Frames from the root down to the hotspot.
    pub path: Vec<Frame>,
    pub metric_id: String,
    pub value: f64,
    pub share: f64,
}

impl HotspotReport {
    pub fn function(&self) -> &str {
        &self.path.last().expect("hotspot path is never empty").function
    }

    pub fn name_chain(&self) -> Vec<String> {
        self.path.iter().map(|f| f.function.clone()).collect()
    }
}

fn exclusive_total(tree: &ProfileTree, metric: &str) -> Result<f64, ProfileError> {
    let info = tree.metric_catalog.get(metric).ok_or_else(|| ProfileError::UnknownMetric(metric.to_string()))?;
    if info.kind != MetricKind::Exclusive {
        return Err(ProfileError::NotExclusive(metric.to_string()));
    }
    Ok(tree.total.get(metric).copied().unwrap_or_else(|| tree.node_sum(metric)))
}

/// Every node carrying `metric`, ranked by value (pre-order on ties).
fn ranked(tree: &ProfileTree, metric: &str) -> Vec<(Vec<Frame>, f64)> {
    let mut out: Vec<(Vec<Frame>, f64)> = Vec::new();
    tree.walk(|chain| {
        if let Some(v) = chain.last().and_then(|n| n.metrics.get(metric)) {
            out.push((chain.iter().map(|n| n.frame.clone()).collect(), *v));
        }
    });
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// The node with the largest exclusive value of `metric`.
pub fn hotspot(tree: &ProfileTree, metric: &str) -> Result<HotspotReport, ProfileError> {
    let total = exclusive_total(tree, metric)?;
    let (path, value) = ranked(tree, metric).into_iter().next().ok_or_else(|| ProfileError::ZeroTotal(metric.to_string()))?;
    if value <= 0.0 || total <= 0.0 {
        return Err(ProfileError::ZeroTotal(metric.to_string()));
    }
    Ok(HotspotReport { path, metric_id: metric.to_string(), value, share: (value / total).min(1.0) })
}

/// Execution context passed along with the profile.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
}

impl RunContext {
    pub fn is_empty(&self) -> bool {
        self.threads.is_none() && self.ranks.is_none() && self.iterations.is_none() && self.hardware.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryOptions {
    pub metric: String,
    pub top_k: usize,
    /// Maximum size of the rendered text in bytes.
    pub budget: usize,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { metric: "time_excl".into(), top_k: 5, budget: 4000 }
    }
}

fn fmt_value(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.4}").trim_end_matches('0').to_string()
    }
}

/// Keeps whole lines of `text` within `budget`, ending with the marker
/// when something was cut.
pub fn fit_to_budget(text: &str, budget: usize) -> String {
    if text.len() <= budget {
        return text.to_string();
    }
    let mut out = String::new();
    for line in text.split_inclusive('\n') {
        if out.len() + line.len() + TRUNCATION_MARKER.len() > budget {
            break;
        }
        out.push_str(line);
    }
    out.push_str(TRUNCATION_MARKER);
    out
}

/// Renders the `top_k` hotspots and the run context as plain text.
pub fn summarize_for_model(tree: &ProfileTree, opts: &SummaryOptions, env: &RunContext) -> String {
    let metric = opts.metric.as_str();
    let total = tree.total.get(metric).copied().unwrap_or_else(|| tree.node_sum(metric));
    let unit = tree.metric_catalog.get(metric).map(|i| i.unit.as_str()).unwrap_or("");
    let ranked = ranked(tree, metric);
    let mut text = String::new();
    let _ = writeln!(text, "Hotspots by {metric} (total {} {unit}):", fmt_value(total));
    for (i, (path, value)) in ranked.iter().take(opts.top_k.max(1)).enumerate() {
        let frame = path.last().expect("non-empty chain");
        let share = if total > 0.0 { 100.0 * value / total } else { 0.0 };
        let chain: Vec<&str> = path.iter().map(|f| f.function.as_str()).collect();
        let _ = write!(
            text,
            "{}. {} at {} share={share:.1}% {metric}={} {unit} context={}",
            i + 1,
            frame.function,
            frame.location(),
            fmt_value(*value),
            chain.join(">")
        );
        // other metrics of the same node, for the model to reason about
        if let Some(node) = tree.find(&chain) {
            for (id, v) in node.metrics.iter().filter(|(id, _)| id.as_str() != metric) {
                let _ = write!(text, " {id}={}", fmt_value(*v));
            }
        }
        text.push('\n');
    }
    if !env.is_empty() {
        text.push_str("Execution context:\n");
        if let Some(t) = env.threads {
            let _ = writeln!(text, "threads: {t}");
        }
        if let Some(r) = env.ranks {
            let _ = writeln!(text, "ranks: {r}");
        }
        if let Some(n) = env.iterations {
            let _ = writeln!(text, "iterations: {n}");
        }
        if let Some(h) = &env.hardware {
            let _ = writeln!(text, "hardware: {h}");
        }
    }
    fit_to_budget(&text, opts.budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricChange {
    pub before: f64,
    pub after: f64,
    /// `(after - before) / before`; absent when `before` is zero.
    pub relative_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub node_path: Vec<String>,
    pub metrics: BTreeMap<String, MetricChange>,
}

/// Compares the metrics of the node at `path` (function names from a root)
/// in two profiles.
pub fn diff_metrics(before: &ProfileTree, after: &ProfileTree, path: &[&str]) -> Result<MetricDelta, ProfileError> {
    let not_found = || ProfileError::NodeNotFound(path.join(">"));
    let a = before.find(path).ok_or_else(not_found)?;
    let b = after.find(path).ok_or_else(not_found)?;
    let metrics = a
        .metrics
        .iter()
        .filter_map(|(id, x)| {
            let y = *b.metrics.get(id)?;
            let relative_change = (*x != 0.0).then(|| (y - x) / x);
            Some((id.clone(), MetricChange { before: *x, after: y, relative_change }))
        })
        .collect();
    Ok(MetricDelta { node_path: path.iter().map(|s| s.to_string()).collect(), metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const METRICS: &str = r#"[{"id":"time_incl","unit":"s","kind":"inclusive"},{"id":"time_excl","unit":"s","kind":"exclusive"}]"#;

    fn doc(roots: &str) -> String {
        format!(r#"{{"schema":"cct-v1","metrics":{METRICS},"roots":{roots}}}"#)
    }

    fn cg_fixture() -> ProfileTree {
        import_profile(
            doc(r#"[{"frame":{"fn":"main","file":"cg.c","line":500},"metrics":{"time_incl":25.0,"time_excl":2.0},"children":[
                {"frame":{"fn":"conj_grad","file":"cg.c","line":412},"metrics":{"time_incl":22.0,"time_excl":22.0}},
                {"frame":{"fn":"makea","file":"cg.c","line":300},"metrics":{"time_incl":1.0,"time_excl":1.0}}]}]"#)
            .as_bytes(),
        )
        .unwrap()
    }

    #[test]
    fn single_node_total() {
        let t = import_profile(doc(r#"[{"frame":{"fn":"main"},"metrics":{"time_excl":10}}]"#).as_bytes()).unwrap();
        assert_eq!(t.total["time_excl"], 10.0);
        let h = hotspot(&t, "time_excl").unwrap();
        assert_eq!(h.function(), "main");
        assert_eq!(h.share, 1.0);
    }

    #[test]
    fn three_node_totals_and_hotspot() {
        let t = cg_fixture();
        assert_eq!(t.total["time_excl"], 25.0);
        assert_eq!(t.total["time_incl"], 25.0);
        let h = hotspot(&t, "time_excl").unwrap();
        assert_eq!(h.name_chain(), ["main", "conj_grad"]);
        assert!((h.share - 0.88).abs() < 1e-12);
        assert_eq!(hotspot(&t, "nope"), Err(ProfileError::UnknownMetric("nope".into())));
        assert_eq!(hotspot(&t, "time_incl"), Err(ProfileError::NotExclusive("time_incl".into())));
    }

    #[test]
    fn xsbench_share() {
        let t = import_profile(
            doc(r#"[{"frame":{"fn":"main"},"metrics":{"time_excl":11.2},"children":[
                {"frame":{"fn":"xs_lookup_kernel"},"metrics":{"time_excl":28.3}}]}]"#)
            .as_bytes(),
        )
        .unwrap();
        let h = hotspot(&t, "time_excl").unwrap();
        assert_eq!(h.function(), "xs_lookup_kernel");
        assert!((h.share - 28.3 / 39.5).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_preorder_first() {
        let t = import_profile(
            doc(r#"[{"frame":{"fn":"a"},"metrics":{"time_excl":5},"children":[{"frame":{"fn":"b"},"metrics":{"time_excl":5}}]},
                {"frame":{"fn":"c"},"metrics":{"time_excl":5}}]"#)
            .as_bytes(),
        )
        .unwrap();
        assert_eq!(hotspot(&t, "time_excl").unwrap().function(), "a");
    }

    #[test]
    fn schema_errors() {
        let child_exceeds = doc(
            r#"[{"frame":{"fn":"main"},"metrics":{"time_incl":5},"children":[{"frame":{"fn":"f"},"metrics":{"time_incl":6}}]}]"#,
        );
        assert!(matches!(import_profile(child_exceeds.as_bytes()), Err(ProfileError::SchemaViolation { path, .. }) if path == "$.roots[0].children[0].metrics.time_incl"));
        let excl_exceeds = doc(r#"[{"frame":{"fn":"main"},"metrics":{"time_incl":5,"time_excl":6}}]"#);
        assert!(matches!(import_profile(excl_exceeds.as_bytes()), Err(ProfileError::SchemaViolation { .. })));
        let negative = doc(r#"[{"frame":{"fn":"main"},"metrics":{"time_excl":-1}}]"#);
        assert!(matches!(import_profile(negative.as_bytes()), Err(ProfileError::NegativeMetric { .. })));
        let undeclared = doc(r#"[{"frame":{"fn":"main"},"metrics":{"cycles":1}}]"#);
        assert!(matches!(import_profile(undeclared.as_bytes()), Err(ProfileError::SchemaViolation { .. })));
        assert!(import_profile(br#"{"schema":"cct-v2","metrics":[],"roots":[]}"#).is_err());
        assert!(import_profile(b"not json").is_err());
        let bad_total = format!(r#"{{"schema":"cct-v1","metrics":{METRICS},"roots":[{{"frame":{{"fn":"m"}},"metrics":{{"time_excl":1}}}}],"totals":{{"time_excl":2}}}}"#);
        assert!(import_profile(bad_total.as_bytes()).is_err());
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let t = cg_fixture();
        let again = import_profile(t.to_json().as_bytes()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn summary_names_hotspot() {
        let t = cg_fixture();
        let opts = SummaryOptions { metric: "time_excl".into(), top_k: 1, budget: 4000 };
        let s = summarize_for_model(&t, &opts, &RunContext::default());
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("conj_grad") && lines[1].contains("88.0%") && lines[1].contains("cg.c:412"));
        assert!(!s.contains("Execution context"));
        let env = RunContext { threads: Some(8), hardware: Some("test box".into()), ..Default::default() };
        let s = summarize_for_model(&t, &opts, &env);
        assert!(s.contains("threads: 8") && s.contains("hardware: test box") && !s.contains("ranks"));
        assert_eq!(s, summarize_for_model(&t, &opts, &env));
    }

    #[test]
    fn tiny_budget_gives_marker_only() {
        let opts = SummaryOptions { metric: "time_excl".into(), top_k: 3, budget: 10 };
        assert_eq!(summarize_for_model(&cg_fixture(), &opts, &RunContext::default()), TRUNCATION_MARKER);
        let opts = SummaryOptions { budget: 120, ..opts };
        let s = summarize_for_model(&cg_fixture(), &opts, &RunContext::default());
        assert!(s.ends_with(TRUNCATION_MARKER) && s.len() <= 120);
    }

    #[test]
    fn metric_diffs() {
        let t = cg_fixture();
        let d = diff_metrics(&t, &t, &["main", "conj_grad"]).unwrap();
        assert!(d.metrics.values().all(|c| c.relative_change == Some(0.0)));
        let before = import_profile(doc(r#"[{"frame":{"fn":"k"},"metrics":{"time_excl":28.3}}]"#).as_bytes()).unwrap();
        let after = import_profile(doc(r#"[{"frame":{"fn":"k"},"metrics":{"time_excl":20.2}}]"#).as_bytes()).unwrap();
        let d = diff_metrics(&before, &after, &["k"]).unwrap();
        let rc = d.metrics["time_excl"].relative_change.unwrap();
        assert!((rc - (20.2 - 28.3) / 28.3).abs() < 1e-12);
        assert!((rc + 0.286).abs() < 5e-4);
        assert_eq!(diff_metrics(&t, &before, &["main"]), Err(ProfileError::NodeNotFound("main".into())));
    }

    fn arb_node(depth: u32) -> BoxedStrategy<ProfileNode> {
        let leaf = ("[a-z]{1,6}", 0.0f64..100.0).prop_map(|(f, x)| ProfileNode {
            frame: Frame { function: f, file: None, line: None },
            metrics: [("time_excl".to_string(), x)].into_iter().collect(),
            children: vec![],
        });
        if depth == 0 {
            return leaf.boxed();
        }
        (leaf, proptest::collection::vec(arb_node(depth - 1), 0..3))
            .prop_map(|(mut n, c)| {
                n.children = c;
                n
            })
            .boxed()
    }

    proptest! {
        #[test]
        fn exclusive_total_matches_node_sum(roots in proptest::collection::vec(arb_node(3), 1..4)) {
            let doc = serde_json::json!({
                "schema": "cct-v1",
                "metrics": [{"id": "time_excl", "unit": "s", "kind": "exclusive"}],
                "roots": roots,
            });
            let t = import_profile(doc.to_string().as_bytes()).unwrap();
            let sum = t.node_sum("time_excl");
            prop_assert!((t.total["time_excl"] - sum).abs() <= 1e-9 * sum.abs().max(1e-300));
            let again = import_profile(t.to_json().as_bytes()).unwrap();
            prop_assert_eq!(&t, &again);
            if let Ok(h) = hotspot(&t, "time_excl") {
                prop_assert!(h.share > 0.0 && h.share <= 1.0);
            }
        }
    }
}
