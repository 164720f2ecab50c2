//! Run configuration: flat `key = value` lines, `#` starts a comment, unknown
//! keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assembly::ProblemCase;
use crate::error::{Error, Result};
use crate::mesh::Diagonal;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub case: String,
    pub box_min: [f64; 2],
    pub box_max: [f64; 2],
    pub h: f64,
    pub diagonal: Diagonal,
    pub mu_range: [f64; 2],
    pub alpha: f64,
    pub gamma_d: f64,
    pub gamma_1: f64,
    pub m_train: usize,
    pub m_test: usize,
    pub seed: u64,
    pub eps_pod: f64,
    pub eps_deim: f64,
    /// Per-component DEIM dimensions `[A, M, b, c]`; `None` keeps all modes
    /// passing `eps_deim`.
    pub deim_dims: Option<[usize; 4]>,
    /// Per-variable POD truncation overriding `eps_pod`.
    pub modes: Option<usize>,
    /// POD dimensions of the error-versus-modes sweep.
    pub sweep_modes: Vec<usize>,
    /// DEIM dimensions of the accuracy trade-off sweep.
    pub deim_sweep: Vec<usize>,
    pub timing_reps: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "square_poisson".into(),
            box_min: [-0.3, -0.3],
            box_max: [2.3, 2.3],
            h: 0.09,
            diagonal: Diagonal::UnionJack,
            mu_range: [0.4, 0.5],
            alpha: 1e-4,
            gamma_d: 10.0,
            gamma_1: 0.1,
            m_train: 370,
            m_test: 30,
            seed: 42,
            eps_pod: 1e-5,
            eps_deim: 1e-10,
            deim_dims: None,
            modes: None,
            sweep_modes: vec![1, 2, 3, 5, 9, 15, 25],
            deim_sweep: vec![1, 2, 5, 10, 20, 30],
            timing_reps: 11,
            output: PathBuf::from("out"),
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| format!("cannot parse `{}`", t.trim())))
        .collect()
}

fn parse_array<T: FromStr + Copy, const K: usize>(s: &str) -> std::result::Result<[T; K], String> {
    let v = parse_list::<T>(s)?;
    v.as_slice()
        .try_into()
        .map_err(|_| format!("expected {K} comma-separated values, found {}", v.len()))
}

fn parse_one<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn diagonal_name(d: Diagonal) -> &'static str {
    match d {
        Diagonal::Main => "main",
        Diagonal::UnionJack => "union_jack",
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            c.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line, msg })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "case" => self.case = v.to_string(),
            "box" => {
                let b: [f64; 4] = parse_array(v)?;
                self.box_min = [b[0], b[1]];
                self.box_max = [b[2], b[3]];
            }
            "h" => self.h = parse_one(v)?,
            "diagonal" => {
                self.diagonal = match v {
                    "main" => Diagonal::Main,
                    "union_jack" => Diagonal::UnionJack,
                    _ => return Err(format!("unknown diagonal `{v}` (main, union_jack)")),
                }
            }
            "mu_range" => self.mu_range = parse_array(v)?,
            "alpha" => self.alpha = parse_one(v)?,
            "gamma_d" => self.gamma_d = parse_one(v)?,
            "gamma_1" => self.gamma_1 = parse_one(v)?,
            "m_train" => self.m_train = parse_one(v)?,
            "m_test" => self.m_test = parse_one(v)?,
            "seed" => self.seed = parse_one(v)?,
            "eps_pod" => self.eps_pod = parse_one(v)?,
            "eps_deim" => self.eps_deim = parse_one(v)?,
            "deim_dims" => self.deim_dims = if v == "auto" { None } else { Some(parse_array(v)?) },
            "modes" => self.modes = if v == "auto" { None } else { Some(parse_one(v)?) },
            "sweep_modes" => self.sweep_modes = parse_list(v)?,
            "deim_sweep" => self.deim_sweep = parse_list(v)?,
            "timing_reps" => self.timing_reps = parse_one(v)?,
            "output" => self.output = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.case != "square_poisson" {
            return bad(format!("unknown case `{}` (square_poisson)", self.case));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return bad(format!("h must be positive, got {}", self.h));
        }
        let [lo, hi] = self.mu_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid mu_range {lo},{hi}"));
        }
        // The square of half-width mu centered at (1, 1) plus one mesh layer
        // must fit strictly inside the box.
        for k in 0..2 {
            if !(1.0 - hi - self.h > self.box_min[k] && 1.0 + hi + self.h < self.box_max[k]) {
                return bad(format!(
                    "mu_range {lo},{hi} with h = {} does not fit inside the box",
                    self.h
                ));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("gamma_d", self.gamma_d), ("gamma_1", self.gamma_1)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("eps_pod", self.eps_pod), ("eps_deim", self.eps_deim)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.m_train < 2 || self.m_test < 1 {
            return bad("m_train must be at least 2 and m_test at least 1".into());
        }
        if self.timing_reps == 0 {
            return bad("timing_reps must be positive".into());
        }
        if self.modes == Some(0) || self.sweep_modes.contains(&0) || self.deim_sweep.contains(&0) {
            return bad("mode counts must be positive".into());
        }
        if self.deim_dims.is_some_and(|d| d.contains(&0)) {
            return bad("deim_dims entries must be positive".into());
        }
        Ok(())
    }

    pub fn problem_case(&self) -> ProblemCase {
        ProblemCase {
            alpha: self.alpha,
            gamma_d: self.gamma_d,
            gamma_1: self.gamma_1,
            ..ProblemCase::square_poisson()
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = [self.box_min[0], self.box_min[1], self.box_max[0], self.box_max[1]];
        let _ = writeln!(s, "case = {}", self.case);
        let _ = writeln!(s, "box = {}", join(&b));
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "diagonal = {}", diagonal_name(self.diagonal));
        let _ = writeln!(s, "mu_range = {}", join(&self.mu_range));
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "gamma_d = {}", self.gamma_d);
        let _ = writeln!(s, "gamma_1 = {}", self.gamma_1);
        let _ = writeln!(s, "m_train = {}", self.m_train);
        let _ = writeln!(s, "m_test = {}", self.m_test);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eps_pod = {}", self.eps_pod);
        let _ = writeln!(s, "eps_deim = {}", self.eps_deim);
        let _ = writeln!(s, "deim_dims = {}", self.deim_dims.map_or("auto".into(), |d| join(&d)));
        let _ = writeln!(s, "modes = {}", self.modes.map_or("auto".into(), |m| m.to_string()));
        let _ = writeln!(s, "sweep_modes = {}", join(&self.sweep_modes));
        let _ = writeln!(s, "deim_sweep = {}", join(&self.deim_sweep));
        let _ = writeln!(s, "timing_reps = {}", self.timing_reps);
        let _ = writeln!(s, "output = {}", self.output.display());
        s
    }
}
