//! Line-based run configuration.
//!
//! ```text
//! # comment
//! [problem]
//! p = 1
//! q = -0.5
//! domain = torus          # torus | disk | rectangle
//! tau1 = 2*pi
//! tau2 = 2*pi
//! upper = (pi, pi)
//! lower =
//!
//! [grid]
//! n1 = 256
//! n2 = 256
//!
//! [solver]
//! tol_outer = 1e-8
//!
//! [output]
//! dir = out
//! ```
//!
//! Values are numbers, `pi`, or products/quotients of those (`2*pi/3`).
//! Vortex lists are `(x,y);(x,y);...`; repeating a point raises its multiplicity.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use csvortex::grid::DomainSpec;
use csvortex::params::{require_indefinite, threshold_area};
use csvortex::variational::{OuterMethod, SolverSettings};
use csvortex::{CouplingParams, Point, VortexConfiguration};
use serde::Serialize;

const SECTIONS: [&str; 4] = ["problem", "grid", "solver", "output"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ErrorKind {
    Syntax,
    Semantic,
}

/// First problem found in a configuration, with its line (0 for overrides
/// and missing keys).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Syntax => "syntax error",
            ErrorKind::Semantic => "semantic error",
        };
        if self.line > 0 {
            write!(f, "line {}: {kind}: {}", self.line, self.message)
        } else {
            write!(f, "{kind}: {}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, kind: ErrorKind::Syntax, message: message.into() }
}

fn semantic(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, kind: ErrorKind::Semantic, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    Flux,
    MaxPrinciple,
    Sandwich,
    Charges,
    Decay,
    Bellman,
}

impl Diagnostic {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "flux" => Diagnostic::Flux,
            "max_principle" => Diagnostic::MaxPrinciple,
            "sandwich" => Diagnostic::Sandwich,
            "charges" => Diagnostic::Charges,
            "decay" => Diagnostic::Decay,
            "bellman" => Diagnostic::Bellman,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemSection {
    pub params: CouplingParams,
    pub vortices: VortexConfiguration,
    pub domain: DomainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
    /// Mesh width for full-plane continuation (defaults from the disk radius and `n1`).
    pub spacing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSection {
    pub settings: SolverSettings,
    pub epsilon: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub radii: Option<Vec<f64>>,
    pub fit_window: [f64; 2],
    pub sweep_factors: Vec<f64>,
    pub monotone_tol: f64,
    pub monotone_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// Requested diagnostics; `None` means the subcommand's defaults.
    pub diagnostics: Option<Vec<Diagnostic>>,
}

/// A parsed and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub output: OutputSection,
    /// Non-fatal findings, e.g. a torus area below the existence threshold.
    pub warnings: Vec<String>,
    /// Canonical `section.key = value` listing after overrides.
    pub echo: Vec<String>,
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

type Table = BTreeMap<(String, String), Entry>;

fn lex(text: &str) -> Result<Table, ConfigError> {
    let mut table = Table::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(line, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(syntax(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected `key = value`, found `{content}`")))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(syntax(line, format!("invalid key `{key}`")));
        }
        let sec = section
            .clone()
            .ok_or_else(|| syntax(line, "key outside of any [section]"))?;
        let slot = (sec.clone(), key.to_string());
        if table.contains_key(&slot) {
            return Err(syntax(line, format!("duplicate key {sec}.{key}")));
        }
        table.insert(slot, Entry { value: value.trim().to_string(), line });
    }
    Ok(table)
}

/// Apply `section.key=value` overrides.
fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), ConfigError> {
    for ov in overrides {
        let (path, value) = ov
            .split_once('=')
            .ok_or_else(|| syntax(0, format!("override `{ov}` is not of the form section.key=value")))?;
        let (sec, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| syntax(0, format!("override key `{path}` needs a section prefix")))?;
        if !SECTIONS.contains(&sec) {
            return Err(syntax(0, format!("unknown section `{sec}` in override")));
        }
        table.insert(
            (sec.to_string(), key.to_string()),
            Entry { value: value.trim().to_string(), line: 0 },
        );
    }
    Ok(())
}

/// Evaluate `a*b/c`-style products of numbers and `pi`.
pub fn parse_real(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, s),
    };
    let mut value = 1.0;
    let mut op = '*';
    let mut token = String::new();
    let flush = |token: &mut String, op: char, value: &mut f64| -> Option<()> {
        let t = token.trim();
        let x = if t == "pi" { PI } else { t.parse::<f64>().ok()? };
        if op == '*' {
            *value *= x;
        } else {
            *value /= x;
        }
        token.clear();
        Some(())
    };
    for c in body.chars() {
        if c == '*' || c == '/' {
            flush(&mut token, op, &mut value)?;
            op = c;
        } else {
            token.push(c);
        }
    }
    flush(&mut token, op, &mut value)?;
    let v = sign * value;
    v.is_finite().then_some(v)
}

fn parse_points(s: &str) -> Option<Vec<Point>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let inner = item.trim().strip_prefix('(')?.strip_suffix(')')?;
            let (x, y) = inner.split_once(',')?;
            Some(Point::new(parse_real(x)?, parse_real(y)?))
        })
        .collect()
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(';').map(parse_real).collect()
}

struct Reader<'a> {
    table: &'a Table,
    used: Vec<(String, String)>,
}

impl<'a> Reader<'a> {
    fn entry(&mut self, sec: &str, key: &str) -> Option<&'a Entry> {
        let slot = (sec.to_string(), key.to_string());
        let e = self.table.get(&slot);
        if e.is_some() {
            self.used.push(slot);
        }
        e
    }

    fn real(&mut self, sec: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.entry(sec, key) {
            None => Ok(None),
            Some(e) => parse_real(&e.value)
                .map(Some)
                .ok_or_else(|| syntax(e.line, format!("{sec}.{key}: `{}` is not a number", e.value))),
        }
    }

    fn required_real(&mut self, sec: &str, key: &str) -> Result<f64, ConfigError> {
        self.real(sec, key)?
            .ok_or_else(|| semantic(0, format!("missing required key {sec}.{key}")))
    }

    fn count(&mut self, sec: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.entry(sec, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<usize>()
                .map(Some)
                .map_err(|_| syntax(e.line, format!("{sec}.{key}: `{}` is not a nonnegative integer", e.value))),
        }
    }

    fn list(&mut self, sec: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.entry(sec, key) {
            None => Ok(None),
            Some(e) => parse_list(&e.value)
                .map(Some)
                .ok_or_else(|| syntax(e.line, format!("{sec}.{key}: expected `a;b;...`, found `{}`", e.value))),
        }
    }

    fn points(&mut self, sec: &str, key: &str) -> Result<Vec<Point>, ConfigError> {
        match self.entry(sec, key) {
            None => Ok(Vec::new()),
            Some(e) => parse_points(&e.value)
                .ok_or_else(|| syntax(e.line, format!("{sec}.{key}: expected `(x,y);(x,y);...`, found `{}`", e.value))),
        }
    }

    fn line_of(&self, sec: &str, key: &str) -> usize {
        self.table
            .get(&(sec.to_string(), key.to_string()))
            .map_or(0, |e| e.line)
    }
}

/// Parse `text`, apply `overrides`, and validate against the solver's preconditions.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = lex(text)?;
    apply_overrides(&mut table, overrides)?;
    let mut rd = Reader { table: &table, used: Vec::new() };
    let mut warnings = Vec::new();

    let p = rd.required_real("problem", "p")?;
    let q = rd.required_real("problem", "q")?;
    let params = CouplingParams::new(p, q).map_err(|e| semantic(rd.line_of("problem", "q"), e.to_string()))?;
    require_indefinite(params).map_err(|e| semantic(rd.line_of("problem", "q"), e.to_string()))?;

    let domain_line = rd.line_of("problem", "domain");
    let domain = match rd.entry("problem", "domain").map(|e| e.value.as_str()) {
        Some("torus") => DomainSpec::Torus {
            tau1: rd.required_real("problem", "tau1")?,
            tau2: rd.required_real("problem", "tau2")?,
        },
        Some("disk") => DomainSpec::Disk { radius: rd.required_real("problem", "radius")? },
        Some("rectangle") => DomainSpec::Rectangle {
            lx: rd.required_real("problem", "lx")?,
            ly: rd.required_real("problem", "ly")?,
        },
        Some(other) => {
            return Err(semantic(domain_line, format!("unknown domain `{other}` (torus, disk or rectangle)")))
        }
        None => return Err(semantic(0, "missing required key problem.domain")),
    };
    domain.validate().map_err(|e| semantic(domain_line, e.to_string()))?;
    let upper = rd.points("problem", "upper")?;
    let lower = rd.points("problem", "lower")?;
    let vortices = VortexConfiguration::new(upper, lower);
    if let Err(e) = domain.check_vortices(&vortices) {
        let line = rd.line_of("problem", "upper").max(rd.line_of("problem", "lower"));
        return Err(semantic(line, e.to_string()));
    }
    if let DomainSpec::Torus { .. } = domain {
        let threshold = threshold_area(params, &vortices);
        if domain.area() <= threshold {
            warnings.push(format!(
                "torus area {:.6} does not exceed the existence threshold {:.6}; torus solves will be rejected",
                domain.area(),
                threshold
            ));
        }
    }

    let n1 = rd.count("grid", "n1")?.ok_or_else(|| semantic(0, "missing required key grid.n1"))?;
    let n2 = rd.count("grid", "n2")?.unwrap_or(n1);
    if let DomainSpec::Disk { .. } = domain {
        if n1 != n2 {
            return Err(semantic(rd.line_of("grid", "n2"), "disk grids are square: n2 must equal n1"));
        }
    }
    let spacing = rd.real("grid", "spacing")?;
    if spacing.is_some_and(|h| !(h > 0.0)) {
        return Err(semantic(rd.line_of("grid", "spacing"), "grid.spacing must be positive"));
    }

    let mut settings = SolverSettings::default();
    if let Some(v) = rd.real("solver", "tol_outer")? {
        settings.tol_outer = v;
    }
    if let Some(v) = rd.real("solver", "tol_inner")? {
        settings.tol_inner = v;
    }
    if let Some(v) = rd.count("solver", "max_outer")? {
        settings.max_outer = v;
    }
    if let Some(v) = rd.count("solver", "max_inner")? {
        settings.max_inner = v;
    }
    if let Some(v) = rd.count("solver", "max_descent")? {
        settings.max_descent = v;
    }
    if let Some(v) = rd.real("solver", "preconditioner_shift")? {
        settings.preconditioner_shift = v;
    }
    if let Some(e) = rd.entry("solver", "method") {
        settings.method = match e.value.as_str() {
            "auto" => OuterMethod::Auto,
            "descent" => OuterMethod::Descent,
            "newton" => OuterMethod::Newton,
            other => return Err(semantic(e.line, format!("unknown solver.method `{other}` (auto, descent, newton)"))),
        };
    }
    for (key, v) in [("tol_outer", settings.tol_outer), ("tol_inner", settings.tol_inner)] {
        if !(v > 0.0) {
            return Err(semantic(rd.line_of("solver", key), format!("solver.{key} must be positive")));
        }
    }
    let epsilon = rd.real("solver", "epsilon")?;
    let epsilons = rd.list("solver", "epsilons")?;
    let eps_bad = epsilon.is_some_and(|e| !(e > 0.0 && e < 1.0))
        || epsilons.as_ref().is_some_and(|v| v.iter().any(|e| !(*e > 0.0 && *e < 1.0)));
    if eps_bad {
        let line = rd.line_of("solver", "epsilon").max(rd.line_of("solver", "epsilons"));
        return Err(semantic(line, "regularization parameters must lie in (0, 1)"));
    }
    let radii = rd.list("solver", "radii")?;
    let fit_window = match rd.list("solver", "fit_window")? {
        None => [3.0, 6.0],
        Some(v) if v.len() == 2 => [v[0], v[1]],
        Some(_) => return Err(semantic(rd.line_of("solver", "fit_window"), "solver.fit_window needs two radii `a;b`")),
    };
    let sweep_factors = rd
        .list("solver", "sweep_factors")?
        .unwrap_or_else(|| vec![0.5, 0.9, 0.99, 1.01, 1.1, 2.0]);
    if sweep_factors.iter().any(|f| !(*f > 0.0)) {
        return Err(semantic(rd.line_of("solver", "sweep_factors"), "sweep factors must be positive"));
    }
    let monotone_tol = rd.real("solver", "monotone_tol")?.unwrap_or(1e-10);
    let monotone_max_iter = rd.count("solver", "monotone_max_iter")?.unwrap_or(5000);

    let dir = rd.entry("output", "dir").map(|e| e.value.clone());
    let diagnostics = match rd.entry("output", "diagnostics") {
        None => None,
        Some(e) => Some(
            e.value
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Diagnostic::parse(s).ok_or_else(|| semantic(e.line, format!("unknown diagnostic `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };

    for (sec, key) in table.keys() {
        if !rd.used.iter().any(|(s, k)| s == sec && k == key) {
            let line = table[&(sec.clone(), key.clone())].line;
            return Err(semantic(line, format!("unknown key {sec}.{key}")));
        }
    }
    let echo = table
        .iter()
        .map(|((s, k), e)| format!("{s}.{k} = {}", e.value))
        .collect();

    Ok(RunConfig {
        problem: ProblemSection { params, vortices, domain },
        grid: GridSection { n1, n2, spacing },
        solver: SolverSection {
            settings,
            epsilon,
            epsilons,
            radii,
            fit_window,
            sweep_factors,
            monotone_tol,
            monotone_max_iter,
        },
        output: OutputSection { dir, diagnostics },
        warnings,
        echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const MINIMAL_TORUS: &str = "\
[problem]
p = 1
q = -0.5
domain = torus
tau1 = 2*pi
tau2 = 2*pi
upper = (pi, pi)

[grid]
n1 = 256
n2 = 256
";

    #[test]
    fn minimal_torus_is_valid() {
        let cfg = parse_config(MINIMAL_TORUS, &[]).unwrap();
        assert_eq!(cfg.problem.vortices.n1(), 1);
        assert_eq!(cfg.problem.vortices.n2(), 0);
        assert!((cfg.problem.domain.area() - 4.0 * PI * PI).abs() < 1e-12);
        assert!(cfg.warnings.is_empty());
    }

    #[test]
    fn q_zero_is_rejected() {
        let text = MINIMAL_TORUS.replace("q = -0.5", "q = 0");
        let err = parse_config(&text, &[]).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Semantic);
        assert_eq!(err.line, 3);
        assert!(err.to_string().contains("q must be nonzero"), "{err}");
    }

    #[test]
    fn positive_determinant_is_out_of_scope() {
        // p = 2, q = 1: det K = 2
        let text = MINIMAL_TORUS.replace("p = 1", "p = 2").replace("q = -0.5", "q = 1");
        let err = parse_config(&text, &[]).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Semantic);
        assert!(err.to_string().contains("out of scope"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = MINIMAL_TORUS.replace("n1 = 256", "n1 256");
        let err = parse_config(&text, &[]).unwrap_err();
        assert_eq!((err.line, err.kind), (10, ErrorKind::Syntax));
        let err = parse_config("p = 1\n", &[]).unwrap_err();
        assert_eq!(err.line, 1);
        let err = parse_config(&MINIMAL_TORUS.replace("upper = (pi, pi)", "upper = (pi, pi"), &[]).unwrap_err();
        assert_eq!((err.line, err.kind), (7, ErrorKind::Syntax));
    }

    #[test]
    fn vortex_outside_domain() {
        let text = MINIMAL_TORUS.replace("upper = (pi, pi)", "upper = (7, 1)");
        let err = parse_config(&text, &[]).unwrap_err();
        assert_eq!((err.line, err.kind), (7, ErrorKind::Semantic));
    }

    #[test]
    fn small_torus_warns() {
        let text = MINIMAL_TORUS.replace("tau1 = 2*pi", "tau1 = 0.5").replace("tau2 = 2*pi", "tau2 = 0.5");
        let text = text.replace("upper = (pi, pi)", "upper = (0.25, 0.25)");
        let cfg = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg.warnings.len(), 1);
    }

    #[test]
    fn overrides_replace_values() {
        let cfg = parse_config(MINIMAL_TORUS, &["grid.n1=32".into(), "solver.method=newton".into()]).unwrap();
        assert_eq!(cfg.grid.n1, 32);
        assert_eq!(cfg.solver.settings.method, OuterMethod::Newton);
        assert!(parse_config(MINIMAL_TORUS, &["n1=3".into()]).is_err());
        assert!(parse_config(MINIMAL_TORUS, &["grid.bogus=3".into()]).is_err());
    }

    #[test]
    fn real_expressions() {
        assert_eq!(parse_real("2*pi"), Some(2.0 * PI));
        assert_eq!(parse_real("-pi/2"), Some(-PI / 2.0));
        assert_eq!(parse_real("1e-3"), Some(1e-3));
        assert_eq!(parse_real("two"), None);
        assert_eq!(parse_points("(0,0);(0,0)").unwrap().len(), 2);
    }
}
