//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be one
//! of the known dotted keys; anything else is a configuration error.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fem::{MassMode, Side, VelocityField};
use crate::oed::CriterionKind;

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    Uniform(f64),
    /// `ū = u_T(m_ref, z₀)` with constant control `z₀` and a prior draw `m_ref`.
    Reachable { z0: f64 },
}

impl TargetSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("uniform") {
            let v = match rest.strip_prefix(':') {
                Some(v) => parse_num::<f64>("control.target", v)?,
                None if rest.is_empty() => 1.0,
                None => return Err(cfg(format!("bad target '{s}'"))),
            };
            return Ok(Self::Uniform(v));
        }
        if let Some(rest) = s.strip_prefix("reachable") {
            let z0 = match rest.strip_prefix(':') {
                Some(v) => parse_num::<f64>("control.target", v)?,
                None if rest.is_empty() => 1.0,
                None => return Err(cfg(format!("bad target '{s}'"))),
            };
            return Ok(Self::Reachable { z0 });
        }
        Err(cfg(format!(
            "control.target must be 'uniform[:value]' or 'reachable[:z0]', got '{s}'"
        )))
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Uniform(v) => format!("uniform:{v}"),
            Self::Reachable { z0 } => format!("reachable:{z0}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMethod {
    Lanczos,
    Nystrom,
}

impl SpectralMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lanczos => "lanczos",
            Self::Nystrom => "nystrom",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mesh_n: usize,
    pub robin_sides: Vec<Side>,
    pub kappa: f64,
    pub gamma_h: f64,
    pub gamma_a: f64,
    pub velocity: VelocityField,
    pub mass_mode: MassMode,
    pub control_region: [f64; 4],
    pub beta_reg: f64,
    pub final_time: f64,
    pub nt: usize,
    pub target: TargetSpec,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub noise_delta: f64,
    /// Peak values of the two Gaussian bumps of the manufactured truth.
    pub truth_amplitudes: [f64; 2],
    pub sensor_rows: usize,
    pub sensor_cols: usize,
    pub oed_k: usize,
    pub oed_criterion: CriterionKind,
    pub random_samples: usize,
    pub k_f: usize,
    pub oversampling: usize,
    pub trace_probes: usize,
    pub trace_tolerance: f64,
    pub k_h: usize,
    pub spectral_method: SpectralMethod,
    pub mc_samples: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh_n: 30,
            robin_sides: vec![Side::Right],
            kappa: 0.15,
            gamma_h: -1.0,
            gamma_a: 0.0,
            velocity: VelocityField::Rotational {
                center: [0.5, 0.5],
                speed: 4.5,
            },
            mass_mode: MassMode::Consistent,
            control_region: [0.25, 0.25, 0.45, 0.45],
            beta_reg: 1e-5,
            final_time: 1.0,
            nt: 20,
            target: TargetSpec::Uniform(1.0),
            prior_alpha: 0.1,
            prior_beta: 1.0,
            noise_delta: 0.01,
            truth_amplitudes: [9.0, -6.0],
            sensor_rows: 9,
            sensor_cols: 9,
            oed_k: 13,
            oed_criterion: CriterionKind::CoedFrozen,
            random_samples: 1000,
            k_f: 60,
            oversampling: 5,
            trace_probes: 50,
            trace_tolerance: 0.01,
            k_h: 13,
            spectral_method: SpectralMethod::Lanczos,
            mc_samples: 100_000,
            seed: 1234,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| cfg(format!("{key}: cannot parse '{}'", v.trim())))
}

fn parse_list(key: &str, v: &str, len: usize) -> Result<Vec<f64>> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| parse_num::<f64>(key, p))
        .collect::<Result<_>>()?;
    if parts.len() != len {
        return Err(cfg(format!("{key}: expected {len} comma-separated values")));
    }
    Ok(parts)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(cfg(format!("{key}: expected a boolean, got '{other}'"))),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "mesh.n",
        "pde.robin_sides",
        "pde.kappa",
        "pde.gamma_h",
        "pde.gamma_a",
        "pde.velocity",
        "pde.lumped_mass",
        "control.region",
        "control.beta_reg",
        "control.T",
        "control.nt",
        "control.target",
        "prior.alpha",
        "prior.beta_pr",
        "noise.delta",
        "truth.amplitudes",
        "sensors.grid",
        "oed.k",
        "oed.criterion",
        "oed.random_samples",
        "lowrank.k_f",
        "lowrank.p",
        "lowrank.trace_probes",
        "lowrank.trace_tolerance",
        "lowrank.k_h",
        "lowrank.spectral",
        "uq.mc_samples",
        "seed",
        "output.dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mesh.n" => self.mesh_n = parse_num(key, v)?,
            "pde.robin_sides" => {
                self.robin_sides = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| Side::parse(s.trim())).collect::<Result<_>>().map_err(
                        |e| cfg(format!("{key}: {e}")),
                    )?
                }
            }
            "pde.kappa" => self.kappa = parse_num(key, v)?,
            "pde.gamma_h" => self.gamma_h = parse_num(key, v)?,
            "pde.gamma_a" => self.gamma_a = parse_num(key, v)?,
            "pde.velocity" => {
                self.velocity = VelocityField::parse(v).map_err(|e| cfg(format!("{key}: {e}")))?
            }
            "pde.lumped_mass" => {
                self.mass_mode = if parse_bool(key, v)? {
                    MassMode::Lumped
                } else {
                    MassMode::Consistent
                }
            }
            "control.region" => {
                let p = parse_list(key, v, 4)?;
                self.control_region = [p[0], p[1], p[2], p[3]];
            }
            "control.beta_reg" => self.beta_reg = parse_num(key, v)?,
            "control.T" => self.final_time = parse_num(key, v)?,
            "control.nt" => self.nt = parse_num(key, v)?,
            "control.target" => self.target = TargetSpec::parse(v)?,
            "prior.alpha" => self.prior_alpha = parse_num(key, v)?,
            "prior.beta_pr" => self.prior_beta = parse_num(key, v)?,
            "noise.delta" => self.noise_delta = parse_num(key, v)?,
            "truth.amplitudes" => {
                let p = parse_list(key, v, 2)?;
                self.truth_amplitudes = [p[0], p[1]];
            }
            "sensors.grid" => {
                let p: Vec<usize> = v
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s))
                    .collect::<Result<_>>()?;
                if p.len() != 2 {
                    return Err(cfg(format!("{key}: expected 'rows,cols'")));
                }
                self.sensor_rows = p[0];
                self.sensor_cols = p[1];
            }
            "oed.k" => self.oed_k = parse_num(key, v)?,
            "oed.criterion" => self.oed_criterion = CriterionKind::parse(v)?,
            "oed.random_samples" => self.random_samples = parse_num(key, v)?,
            "lowrank.k_f" => self.k_f = parse_num(key, v)?,
            "lowrank.p" => self.oversampling = parse_num(key, v)?,
            "lowrank.trace_probes" => self.trace_probes = parse_num(key, v)?,
            "lowrank.trace_tolerance" => self.trace_tolerance = parse_num(key, v)?,
            "lowrank.k_h" => self.k_h = parse_num(key, v)?,
            "lowrank.spectral" => {
                self.spectral_method = match v {
                    "lanczos" => SpectralMethod::Lanczos,
                    "nystrom" => SpectralMethod::Nystrom,
                    other => return Err(cfg(format!("{key}: unknown method '{other}'"))),
                }
            }
            "uq.mc_samples" => self.mc_samples = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(cfg(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg(format!("line {}: expected 'key = value'", lineno + 1)))?;
            c.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => cfg(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(cfg(m));
        if self.mesh_n < 2 {
            return bad(format!("mesh.n must be at least 2, got {}", self.mesh_n));
        }
        if !(self.kappa > 0.0) {
            return bad(format!("pde.kappa must be positive, got {}", self.kappa));
        }
        if !(self.gamma_h < 0.0) {
            return bad(format!("pde.gamma_h must be negative, got {}", self.gamma_h));
        }
        let [x0, y0, x1, y1] = self.control_region;
        if !(x0 < x1 && y0 < y1) {
            return bad("control.region must satisfy x0 < x1 and y0 < y1".into());
        }
        if !(self.beta_reg > 0.0) {
            return bad(format!("control.beta_reg must be positive, got {}", self.beta_reg));
        }
        if !(self.final_time > 0.0) || self.nt == 0 {
            return bad("control.T must be positive and control.nt at least 1".into());
        }
        if !(self.prior_alpha > 0.0 && self.prior_beta > 0.0) {
            return bad("prior.alpha and prior.beta_pr must be positive".into());
        }
        if !(self.noise_delta > 0.0) {
            return bad(format!("noise.delta must be positive, got {}", self.noise_delta));
        }
        let n_s = self.sensor_rows * self.sensor_cols;
        if n_s == 0 {
            return bad("sensors.grid must have at least one sensor".into());
        }
        if self.oed_k == 0 || self.oed_k > n_s {
            return bad(format!("oed.k must lie in [1, {n_s}], got {}", self.oed_k));
        }
        if self.k_f == 0 || self.k_f + self.oversampling > n_s {
            return bad(format!(
                "lowrank.k_f + lowrank.p must lie in [1, {n_s}], got {}",
                self.k_f + self.oversampling
            ));
        }
        if self.trace_probes < 2 {
            return bad("lowrank.trace_probes must be at least 2".into());
        }
        if self.k_h == 0 {
            return bad("lowrank.k_h must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let sides: Vec<&str> = self
            .robin_sides
            .iter()
            .map(|s| match s {
                Side::Bottom => "bottom",
                Side::Right => "right",
                Side::Top => "top",
                Side::Left => "left",
            })
            .collect();
        let r = self.control_region;
        vec![
            ("mesh.n", self.mesh_n.to_string()),
            ("pde.robin_sides", if sides.is_empty() { "none".into() } else { sides.join(",") }),
            ("pde.kappa", self.kappa.to_string()),
            ("pde.gamma_h", self.gamma_h.to_string()),
            ("pde.gamma_a", self.gamma_a.to_string()),
            ("pde.velocity", self.velocity.describe()),
            ("pde.lumped_mass", (self.mass_mode == MassMode::Lumped).to_string()),
            ("control.region", format!("{},{},{},{}", r[0], r[1], r[2], r[3])),
            ("control.beta_reg", self.beta_reg.to_string()),
            ("control.T", self.final_time.to_string()),
            ("control.nt", self.nt.to_string()),
            ("control.target", self.target.describe()),
            ("prior.alpha", self.prior_alpha.to_string()),
            ("prior.beta_pr", self.prior_beta.to_string()),
            ("noise.delta", self.noise_delta.to_string()),
            (
                "truth.amplitudes",
                format!("{},{}", self.truth_amplitudes[0], self.truth_amplitudes[1]),
            ),
            ("sensors.grid", format!("{},{}", self.sensor_rows, self.sensor_cols)),
            ("oed.k", self.oed_k.to_string()),
            ("oed.criterion", self.oed_criterion.name().to_string()),
            ("oed.random_samples", self.random_samples.to_string()),
            ("lowrank.k_f", self.k_f.to_string()),
            ("lowrank.p", self.oversampling.to_string()),
            ("lowrank.trace_probes", self.trace_probes.to_string()),
            ("lowrank.trace_tolerance", self.trace_tolerance.to_string()),
            ("lowrank.k_h", self.k_h.to_string()),
            ("lowrank.spectral", self.spectral_method.name().into()),
            ("uq.mc_samples", self.mc_samples.to_string()),
            ("seed", self.seed.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.mesh_n, c.nt, c.oed_k), (30, 20, 13));
        assert_eq!(c.sensor_rows * c.sensor_cols, 81);
        assert_eq!((c.prior_alpha, c.prior_beta, c.beta_reg), (0.1, 1.0, 1e-5));
        c.validate().unwrap();
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = ExperimentConfig::parse(
            "# comment\n\nmesh.n = 10\ncontrol.target = reachable:0.5\nsensors.grid=3,4\noed.k = 4\nlowrank.k_f = 6\nlowrank.p = 2\nlowrank.k_h = 4\npde.velocity = zero\n",
        )
        .unwrap();
        assert_eq!(c.mesh_n, 10);
        assert_eq!(c.target, TargetSpec::Reachable { z0: 0.5 });
        assert_eq!((c.sensor_rows, c.sensor_cols), (3, 4));
        assert_eq!(c.velocity, VelocityField::Zero);
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(matches!(ExperimentConfig::parse("mesh.size = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("mesh.n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("mesh.n = ten"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("pde.gamma_h = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("oed.k = 90"), Err(Error::Config(_))));
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("control.region", "0.1,0.2,0.3,0.4").unwrap();
        c.set("pde.robin_sides", "right,top").unwrap();
        c.set("oed.criterion", "classical-A").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for (k, _) in c.entries() {
            assert!(ExperimentConfig::KEYS.contains(&k));
        }
    }
}
