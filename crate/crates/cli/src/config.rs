//! Run configuration: TOML files and the textual forms accepted by flags.
//!
//! Numbers may be written as TOML numbers or as strings holding a decimal,
//! a rational `a/b`, or `pi` (optionally negated or as the numerator).

use std::fmt;
use std::path::PathBuf;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A real number that accepts rational and `pi` spellings on input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Num {
    pub fn get(self) -> f64 {
        self.0
    }
}

fn parse_atom(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, s),
    };
    let v = if body.eq_ignore_ascii_case("pi") {
        std::f64::consts::PI
    } else {
        body.parse::<f64>().map_err(|_| format!("'{s}' is not a number"))?
    };
    Ok(if neg { -v } else { v })
}

/// Parse `1.5`, `-3/4`, `pi`, `-pi/2` and the like.
pub fn parse_number(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let d = parse_atom(b)?;
            if d == 0.0 {
                return Err(format!("'{s}' divides by zero"));
            }
            parse_atom(a)? / d
        }
        None => parse_atom(s)?,
    };
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

impl std::str::FromStr for Num {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_number(s).map(Num)
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a string such as \"3/4\" or \"pi\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Num, E> {
                parse_number(v).map(Num).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Parse a comma-separated vector of numbers.
pub fn parse_vector(s: &str) -> Result<Vec<Num>, String> {
    s.split(',').map(|t| t.parse::<Num>()).collect()
}

/// Noise process selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProcessSpec {
    /// The process shipped with the chosen system.
    Reference,
    Uniform { lo: Num, hi: Num },
    Constant { value: Num },
    /// Rows list `P(next = row | current = column)`, so columns sum to one.
    Markov {
        transition: Vec<Vec<Num>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_mode: Option<usize>,
    },
}

impl std::str::FromStr for ProcessSpec {
    type Err = String;

    /// `reference`, `uniform:LO,HI`, `constant:V`, or `markov:ROW;ROW;...`
    /// with comma-separated entries per row.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "reference" => Ok(ProcessSpec::Reference),
            "uniform" => match parse_vector(args)?.as_slice() {
                [lo, hi] => Ok(ProcessSpec::Uniform { lo: *lo, hi: *hi }),
                _ => Err(format!("uniform needs two bounds, got '{args}'")),
            },
            "constant" => Ok(ProcessSpec::Constant { value: args.parse()? }),
            "markov" => {
                let transition = args.split(';').map(parse_vector).collect::<Result<Vec<_>, _>>()?;
                Ok(ProcessSpec::Markov { transition, initial_mode: None })
            }
            other => Err(format!("unknown process kind '{other}' (reference, uniform, constant, markov)")),
        }
    }
}

/// Axis-aligned grid: per axis `lo..=hi` in steps of `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<Num>,
    pub hi: Vec<Num>,
    pub step: Vec<Num>,
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    /// Comma-separated axes, each `lo:hi:step` or a single fixed value.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut g = GridSpec { lo: Vec::new(), hi: Vec::new(), step: Vec::new() };
        for axis in s.split(',') {
            let parts: Vec<&str> = axis.split(':').collect();
            let (lo, hi, step) = match parts.as_slice() {
                [v] => {
                    let v: Num = v.parse()?;
                    (v, v, Num(1.0))
                }
                [lo, hi, step] => (lo.parse()?, hi.parse()?, step.parse()?),
                _ => return Err(format!("grid axis '{axis}' must be 'lo:hi:step' or a single value")),
            };
            g.lo.push(lo);
            g.hi.push(hi);
            g.step.push(step);
        }
        Ok(g)
    }
}

/// Every setting a subcommand can take; flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<Num>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_gain: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl RunConfig {
    /// Parse TOML; errors carry the line and column of the offending item.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Values from `other` win where present.
    pub fn overlay(self, other: RunConfig) -> RunConfig {
        RunConfig {
            system: other.system.or(self.system),
            lambda2: other.lambda2.or(self.lambda2),
            horizon: other.horizon.or(self.horizon),
            paths: other.paths.or(self.paths),
            seed: other.seed.or(self.seed),
            steps: other.steps.or(self.steps),
            x0: other.x0.or(self.x0),
            common_gain: other.common_gain.or(self.common_gain),
            design: other.design.or(self.design),
            out: other.out.or(self.out),
            process: other.process.or(self.process),
            grid: other.grid.or(self.grid),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_accept_rationals_and_pi() {
        assert_eq!(parse_number("3/4").unwrap(), 0.75);
        assert_eq!(parse_number("-pi").unwrap(), -std::f64::consts::PI);
        assert_eq!(parse_number("pi/2").unwrap(), std::f64::consts::FRAC_PI_2);
        assert!(parse_number("1/0").is_err());
        assert!(parse_number("abc").is_err());
    }

    #[test]
    fn flag_forms() {
        let p: ProcessSpec = "uniform:1,2".parse().unwrap();
        assert_eq!(p, ProcessSpec::Uniform { lo: Num(1.0), hi: Num(2.0) });
        let m: ProcessSpec = "markov:0.5,0.2;0.5,0.8".parse().unwrap();
        let ProcessSpec::Markov { transition, .. } = m else { panic!() };
        assert_eq!(transition[1][1], Num(0.8));
        let g: GridSpec = "-pi:pi:0.5,0,0".parse().unwrap();
        assert_eq!(g.lo.len(), 3);
        assert_eq!(g.hi[0], Num(std::f64::consts::PI));
        assert!("1:2".parse::<GridSpec>().is_err());
    }

    #[test]
    fn toml_with_rationals() {
        let c = RunConfig::from_toml(
            "system = \"pendulum-cl\"\nlambda2 = \"9/10\"\nx0 = [\"2\", 0, 0]\n[process]\nkind = \"uniform\"\nlo = 1\nhi = \"2\"\n",
        )
        .unwrap();
        assert_eq!(c.lambda2, Some(Num(0.9)));
        assert_eq!(c.process, Some(ProcessSpec::Uniform { lo: Num(1.0), hi: Num(2.0) }));
    }

    #[test]
    fn malformed_toml_reports_line() {
        let err = RunConfig::from_toml("seed = 3\nlambda2 = \"nine\"\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }
}
