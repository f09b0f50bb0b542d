//! Sectioned plain-text case files: parsing with line/column errors,
//! validation, serialization, and assembly of the core model types.
//!
//! ```text
//! GRID 1                                  # format version
//! BUS <id> <alpha> <beta> <d_hat>         # one line per bus, ids 1..n
//! BRANCH <from> <to> <susceptance> <capacity|inf>
//! SIGMA <sigma_e>                         # optional, default 1
//! COV                                     # optional, n rows of n entries
//! <row entries...>
//! NOMINAL                                 # optional reference dispatch
//! <bus> <generation>
//! ```
//!
//! `#` starts a comment anywhere on a line. Bus ids are 1-indexed.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rld_core::dcopf::{CostModel, OpfError};
use rld_core::network::{Branch, Network, NetworkError};
use rld_core::rld::{Forecast, RldError};

/// Default scenario-sampling seed shared by every command.
pub const DEFAULT_SEED: u64 = 42;

/// Default Monte Carlo scenario count; keeps benchmark-scale cost means
/// under roughly one percent standard error.
pub const DEFAULT_SCENARIOS: usize = 10_000;

/// Default sigma sweep: 1 to 40 in steps of 5.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..8).map(|k| 1.0 + 5.0 * k as f64).collect()
}

#[derive(Debug)]
pub enum CaseError {
    Parse { line: usize, col: usize, message: String },
    Validation(String),
}

impl fmt::Display for CaseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseError::Parse { line, col, message } => {
                write!(f, "line {line}, column {col}: {message}")
            }
            CaseError::Validation(message) => write!(f, "{message}"),
        }
    }
}

impl std::error::Error for CaseError {}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSpec {
    pub alpha: f64,
    pub beta: f64,
    pub d_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    /// 1-indexed endpoints as written in the file.
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub capacity: Option<f64>,
}

/// A parsed case: per-bus prices and forecast demand, branch data, the
/// error scale and correlation, and an optional pinned reference dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseFile {
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    pub sigma_e: f64,
    /// Error correlation when a COV section is present; identity otherwise.
    pub corr: Option<DMatrix<f64>>,
    /// Reference generation entries as (1-indexed bus, MW).
    pub nominal: Vec<(usize, f64)>,
}

impl CaseFile {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn network(&self) -> Result<Network, NetworkError> {
        let branches = self
            .branches
            .iter()
            .map(|b| Branch {
                from: b.from - 1,
                to: b.to - 1,
                susceptance: b.susceptance,
                capacity: b.capacity,
            })
            .collect();
        Network::new(self.n(), branches)
    }

    /// Day-ahead and real-time prices; a beta ratio replaces every
    /// real-time price with the ratio times the highest day-ahead price.
    pub fn cost_model(&self, beta_ratio: Option<f64>) -> Result<CostModel, OpfError> {
        let n = self.n();
        let alpha = DVector::from_fn(n, |i, _| self.buses[i].alpha);
        let beta = match beta_ratio {
            Some(r) => DVector::from_element(n, r * alpha.max()),
            None => DVector::from_fn(n, |i, _| self.buses[i].beta),
        };
        CostModel::new(alpha, beta)
    }

    pub fn demand(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.buses[i].d_hat)
    }

    pub fn forecast(&self, sigma_override: Option<f64>) -> Result<Forecast, RldError> {
        let n = self.n();
        let corr = self.corr.clone().unwrap_or_else(|| DMatrix::identity(n, n));
        Forecast::new(self.demand(), sigma_override.unwrap_or(self.sigma_e), corr)
    }

    /// The pinned reference dispatch as a full bus vector, if the case
    /// carries one.
    pub fn reference_generation(&self) -> Option<DVector<f64>> {
        if self.nominal.is_empty() {
            return None;
        }
        let mut g = DVector::zeros(self.n());
        for &(bus, mw) in &self.nominal {
            g[bus - 1] = mw;
        }
        Some(g)
    }

    /// Writes the case back out in the file grammar; parsing the result
    /// reproduces the case exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::from("GRID 1\n");
        for (i, b) in self.buses.iter().enumerate() {
            out += &format!("BUS {} {} {} {}\n", i + 1, b.alpha, b.beta, b.d_hat);
        }
        for b in &self.branches {
            let cap = match b.capacity {
                Some(c) => c.to_string(),
                None => "inf".to_string(),
            };
            out += &format!("BRANCH {} {} {} {}\n", b.from, b.to, b.susceptance, cap);
        }
        out += &format!("SIGMA {}\n", self.sigma_e);
        if let Some(c) = &self.corr {
            out += "COV\n";
            for i in 0..c.nrows() {
                let row: Vec<String> = (0..c.ncols()).map(|j| c[(i, j)].to_string()).collect();
                out += &row.join(" ");
                out.push('\n');
            }
        }
        if !self.nominal.is_empty() {
            out += "NOMINAL\n";
            for &(bus, mw) in &self.nominal {
                out += &format!("{bus} {mw}\n");
            }
        }
        out
    }
}

struct Tok<'a> {
    col: usize,
    text: &'a str,
}

/// Splits one line into whitespace-separated tokens with 1-based columns,
/// dropping any `#` comment.
fn tokens(line: &str) -> Vec<Tok<'_>> {
    let stripped = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in stripped.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Tok { col: s + 1, text: &stripped[s..i] });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Tok { col: s + 1, text: &stripped[s..] });
    }
    out
}

fn parse_f64(line: usize, tok: &Tok<'_>, what: &str) -> Result<f64, CaseError> {
    tok.text.parse::<f64>().map_err(|_| CaseError::Parse {
        line,
        col: tok.col,
        message: format!("expected {what}, found '{}'", tok.text),
    })
}

fn parse_id(line: usize, tok: &Tok<'_>, what: &str) -> Result<usize, CaseError> {
    match tok.text.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(CaseError::Parse {
            line,
            col: tok.col,
            message: format!("expected {what} (a positive integer), found '{}'", tok.text),
        }),
    }
}

fn expect_len(line: usize, toks: &[Tok<'_>], want: usize, shape: &str) -> Result<(), CaseError> {
    if toks.len() != want {
        let col = toks.get(want.min(toks.len()).saturating_sub(1)).map_or(1, |t| t.col);
        return Err(CaseError::Parse {
            line,
            col,
            message: format!("expected '{shape}', found {} fields", toks.len()),
        });
    }
    Ok(())
}

enum Block {
    Top,
    /// Collecting covariance rows; holds the line that opened the section.
    Cov(usize),
    Nominal,
}

const KEYWORDS: [&str; 6] = ["GRID", "BUS", "BRANCH", "SIGMA", "COV", "NOMINAL"];

pub fn parse_case(text: &str) -> Result<CaseFile, CaseError> {
    let mut grid_seen = false;
    let mut bus_lines: Vec<(usize, usize, BusSpec)> = Vec::new();
    let mut branches: Vec<(usize, BranchSpec)> = Vec::new();
    let mut sigma: Option<f64> = None;
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    let mut cov_dim = 0usize;
    let mut nominal: Vec<(usize, usize, f64)> = Vec::new();
    let mut block = Block::Top;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks = tokens(raw);
        if toks.is_empty() {
            continue;
        }
        let head = toks[0].text;
        let is_keyword = KEYWORDS.contains(&head);

        if !grid_seen {
            if head != "GRID" {
                return Err(CaseError::Parse {
                    line,
                    col: toks[0].col,
                    message: format!("case files start with 'GRID 1', found '{head}'"),
                });
            }
            expect_len(line, &toks, 2, "GRID <version>")?;
            if toks[1].text != "1" {
                return Err(CaseError::Parse {
                    line,
                    col: toks[1].col,
                    message: format!("unsupported format version '{}'", toks[1].text),
                });
            }
            grid_seen = true;
            continue;
        }

        if let Block::Cov(opened) = block {
            if is_keyword {
                return Err(CaseError::Parse {
                    line,
                    col: toks[0].col,
                    message: format!(
                        "COV section from line {opened} has {} of {cov_dim} rows",
                        cov_rows.len()
                    ),
                });
            }
            expect_len(line, &toks, cov_dim, "a covariance row")?;
            let mut row = Vec::with_capacity(cov_dim);
            for t in &toks {
                row.push(parse_f64(line, t, "a covariance entry")?);
            }
            cov_rows.push(row);
            if cov_rows.len() == cov_dim {
                block = Block::Top;
            }
            continue;
        }

        if !is_keyword {
            if matches!(block, Block::Nominal) {
                expect_len(line, &toks, 2, "<bus> <generation>")?;
                let bus = parse_id(line, &toks[0], "a bus id")?;
                let mw = parse_f64(line, &toks[1], "a generation value")?;
                nominal.push((line, bus, mw));
                continue;
            }
            return Err(CaseError::Parse {
                line,
                col: toks[0].col,
                message: format!("expected a section keyword, found '{head}'"),
            });
        }

        block = Block::Top;
        match head {
            "GRID" => {
                return Err(CaseError::Parse {
                    line,
                    col: toks[0].col,
                    message: "duplicate GRID line".to_string(),
                });
            }
            "BUS" => {
                expect_len(line, &toks, 5, "BUS <id> <alpha> <beta> <d_hat>")?;
                let id = parse_id(line, &toks[1], "a bus id")?;
                let spec = BusSpec {
                    alpha: parse_f64(line, &toks[2], "a day-ahead price")?,
                    beta: parse_f64(line, &toks[3], "a real-time price")?,
                    d_hat: parse_f64(line, &toks[4], "a demand forecast")?,
                };
                bus_lines.push((line, id, spec));
            }
            "BRANCH" => {
                expect_len(line, &toks, 5, "BRANCH <from> <to> <susceptance> <capacity|inf>")?;
                let from = parse_id(line, &toks[1], "a bus id")?;
                let to = parse_id(line, &toks[2], "a bus id")?;
                let susceptance = parse_f64(line, &toks[3], "a susceptance")?;
                let capacity = if toks[4].text == "inf" {
                    None
                } else {
                    Some(parse_f64(line, &toks[4], "a capacity or 'inf'")?)
                };
                branches.push((line, BranchSpec { from, to, susceptance, capacity }));
            }
            "SIGMA" => {
                expect_len(line, &toks, 2, "SIGMA <sigma_e>")?;
                if sigma.is_some() {
                    return Err(CaseError::Parse {
                        line,
                        col: toks[0].col,
                        message: "duplicate SIGMA line".to_string(),
                    });
                }
                sigma = Some(parse_f64(line, &toks[1], "an error scale")?);
            }
            "COV" => {
                expect_len(line, &toks, 1, "COV")?;
                if !cov_rows.is_empty() {
                    return Err(CaseError::Parse {
                        line,
                        col: toks[0].col,
                        message: "duplicate COV section".to_string(),
                    });
                }
                cov_dim = bus_lines.len();
                if cov_dim == 0 {
                    return Err(CaseError::Parse {
                        line,
                        col: toks[0].col,
                        message: "COV must follow the BUS section".to_string(),
                    });
                }
                block = Block::Cov(line);
            }
            "NOMINAL" => {
                expect_len(line, &toks, 1, "NOMINAL")?;
                block = Block::Nominal;
            }
            _ => unreachable!(),
        }
    }

    if !grid_seen {
        return Err(CaseError::Parse {
            line: 1,
            col: 1,
            message: "empty case file; expected 'GRID 1'".to_string(),
        });
    }
    if let Block::Cov(opened) = block {
        return Err(CaseError::Parse {
            line: opened,
            col: 1,
            message: format!("COV section has {} of {cov_dim} rows", cov_rows.len()),
        });
    }

    validate(bus_lines, branches, sigma, cov_rows, nominal)
}

fn validate(
    bus_lines: Vec<(usize, usize, BusSpec)>,
    branch_lines: Vec<(usize, BranchSpec)>,
    sigma: Option<f64>,
    cov_rows: Vec<Vec<f64>>,
    nominal_lines: Vec<(usize, usize, f64)>,
) -> Result<CaseFile, CaseError> {
    let n = bus_lines.len();
    if n == 0 {
        return Err(CaseError::Validation("a case needs at least one BUS line".to_string()));
    }
    let mut buses: Vec<Option<BusSpec>> = vec![None; n];
    for (line, id, spec) in bus_lines {
        if id > n {
            return Err(CaseError::Validation(format!(
                "bus ids must cover 1..{n} exactly: id {id} on line {line} is out of range"
            )));
        }
        if buses[id - 1].is_some() {
            return Err(CaseError::Validation(format!(
                "bus ids must cover 1..{n} exactly: id {id} on line {line} repeats"
            )));
        }
        if !(spec.alpha.is_finite() && spec.beta.is_finite() && spec.d_hat.is_finite()) {
            return Err(CaseError::Validation(format!(
                "bus {id} has a non-finite price or demand"
            )));
        }
        buses[id - 1] = Some(spec);
    }
    let buses: Vec<BusSpec> = buses.into_iter().map(Option::unwrap).collect();

    let mut branches = Vec::with_capacity(branch_lines.len());
    for (line, b) in branch_lines {
        if b.from > n || b.to > n {
            return Err(CaseError::Validation(format!(
                "branch on line {line} references bus {} but the case has {n} buses",
                b.from.max(b.to)
            )));
        }
        if b.from == b.to {
            return Err(CaseError::Validation(format!(
                "branch on line {line} connects bus {} to itself",
                b.from
            )));
        }
        if !(b.susceptance.is_finite() && b.susceptance > 0.0) {
            return Err(CaseError::Validation(format!(
                "branch on line {line} needs a positive susceptance"
            )));
        }
        if let Some(c) = b.capacity {
            if !(c.is_finite() && c > 0.0) {
                return Err(CaseError::Validation(format!(
                    "branch on line {line} needs a positive capacity or 'inf'"
                )));
            }
        }
        branches.push(b);
    }

    let sigma_e = sigma.unwrap_or(1.0);
    if !(sigma_e.is_finite() && sigma_e >= 0.0) {
        return Err(CaseError::Validation("SIGMA must be finite and >= 0".to_string()));
    }

    let corr = if cov_rows.is_empty() {
        None
    } else {
        let c = DMatrix::from_fn(n, n, |i, j| cov_rows[i][j]);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(CaseError::Validation("covariance entries must be finite".to_string()));
        }
        let scale = 1.0 + c.amax();
        for i in 0..n {
            for j in (i + 1)..n {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-9 * scale {
                    return Err(CaseError::Validation(format!(
                        "covariance must be symmetric: entries ({},{}) and ({},{}) differ",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        Some(c)
    };

    let mut nominal = Vec::with_capacity(nominal_lines.len());
    let mut seen = vec![false; n];
    for (line, bus, mw) in nominal_lines {
        if bus > n {
            return Err(CaseError::Validation(format!(
                "NOMINAL entry on line {line} references bus {bus} but the case has {n} buses"
            )));
        }
        if seen[bus - 1] {
            return Err(CaseError::Validation(format!(
                "NOMINAL entry on line {line} repeats bus {bus}"
            )));
        }
        if !(mw.is_finite() && mw >= 0.0) {
            return Err(CaseError::Validation(format!(
                "NOMINAL generation for bus {bus} must be finite and >= 0"
            )));
        }
        seen[bus - 1] = true;
        nominal.push((bus, mw));
    }

    Ok(CaseFile { buses, branches, sigma_e, corr, nominal })
}
