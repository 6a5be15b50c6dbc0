//! Effective run configuration: built-in defaults, then an INI file, then
//! command-line flags. The merged result is written next to every run's
//! outputs and can be fed back through `--config` to replay it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::CliError;

type Table = &'static [(&'static str, &'static str)];

pub const GLOBAL: Table = &[("seed", "0"), ("dtype", "f64"), ("threads", "0"), ("out", "runs")];

pub const CHECK: Table = &[
    ("sizes", "4x4,6x6,9x9,12x12"),
    ("schemes", "sbt,fixed-exp,softmax,truncated,uniform"),
    ("heads", "1,4"),
    ("head_dim", "4"),
    ("trials", "5"),
    ("tolerance", "1e-8"),
    ("partition", "unit-ring"),
    ("featmap", "adaptive"),
    ("r_max", "4"),
    ("tau", "1e-3"),
    ("force", "false"),
    ("sabotage", "none"),
];

pub const GRADCHECK: Table = &[
    ("scope", "attention"),
    // Empty means the scope's own default.
    ("tolerance", ""),
    ("step", "1e-5"),
    ("sides", "4,5,6"),
    ("channels", "3"),
];

pub const BENCH: Table = &[
    ("variants", "softmax,linearized,naive,dp,dyadic,dp-backward"),
    ("sizes", "64,144,256,576"),
    ("repetitions", "5"),
    ("warmup", "1"),
    ("batch", "1"),
    ("channels", "8"),
    ("scheme", "sbt"),
    ("r_max", "fixed:4"),
    ("naive_r_max", "linear"),
    ("tau", "1e-3"),
    ("parallel", "false"),
    ("memory_limit", "2147483648"),
];

pub const WEIGHTS: Table = &[
    ("scheme", "sbt"),
    ("grid", "8x8"),
    ("query", "4,4"),
    ("r_max", "4"),
    ("tau", "1e-3"),
    ("partition", "unit-ring"),
    ("merge", "normalized"),
    ("offset", "shifted"),
    ("value_dim", "4"),
    ("embed_dim", "4"),
];

pub const TRAIN: Table = &[
    ("task", "local-majority"),
    ("grid", "8x8"),
    ("steps", "200"),
    ("batch", "16"),
    ("lr", "0.05"),
    ("momentum", "0.9"),
    ("optimizer", "sgd"),
    ("clip_norm", "1.0"),
    ("train_size", "128"),
    ("log_every", "10"),
    ("layers", "2"),
    ("ripple_layers", "1"),
    ("heads", "2"),
    ("model_dim", "16"),
    ("scheme", "sbt"),
    ("partition", "unit-ring"),
    ("featmap", "adaptive"),
    ("r_max", "4"),
    ("tau", "1e-3"),
];

pub fn table(section: &str) -> Option<Table> {
    Some(match section {
        "global" => GLOBAL,
        "check" => CHECK,
        "gradcheck" => GRADCHECK,
        "bench" => BENCH,
        "weights" => WEIGHTS,
        "train" => TRAIN,
        _ => return None,
    })
}

pub type Sections = BTreeMap<String, BTreeMap<String, String>>;

/// Parses `[section]` headers and `key = value` lines. `#` and `;` start
/// comments. Every section and key must be known.
pub fn parse_ini(text: &str) -> Result<Sections, CliError> {
    let mut out = Sections::new();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = n + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if table(name).is_none() {
                return Err(CliError::Usage(format!("config line {lineno}: unknown section [{name}]")));
            }
            out.entry(name.to_string()).or_default();
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {lineno}: expected `key = value`")));
        };
        let Some(sec) = &section else {
            return Err(CliError::Usage(format!("config line {lineno}: key outside any section")));
        };
        let key = key.trim();
        if !table(sec).expect("checked").iter().any(|(k, _)| *k == key) {
            return Err(CliError::Usage(format!("config line {lineno}: unknown key `{key}` in [{sec}]")));
        }
        out.get_mut(sec).expect("inserted").insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// The merged `[global]` and command sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: &'static str,
    values: Sections,
}

impl Settings {
    pub fn resolve(
        command: &'static str,
        file: Option<&Sections>,
        global_flags: &[(&'static str, String)],
        flags: &[(&'static str, String)],
    ) -> Result<Self, CliError> {
        let mut values = Sections::new();
        for (sec, overrides) in [("global", global_flags), (command, flags)] {
            let defaults = table(sec).expect("known section");
            let mut map: BTreeMap<String, String> =
                defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            if let Some(f) = file.and_then(|f| f.get(sec)) {
                map.extend(f.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
            for (k, v) in overrides {
                debug_assert!(defaults.iter().any(|(d, _)| d == k), "flag {k} has no default");
                map.insert(k.to_string(), v.clone());
            }
            values.insert(sec.to_string(), map);
        }
        Ok(Self { command, values })
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(section)
            .and_then(|s| s.get(key))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no setting {section}.{key}"))
    }

    fn parse<T: FromStr>(section: &str, key: &str, s: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        s.parse()
            .map_err(|e| CliError::Usage(format!("{section}.{key} = `{s}`: {e}")))
    }

    pub fn global<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Self::parse("global", key, self.raw("global", key))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Self::parse(self.command, key, self.raw(self.command, key))
    }

    /// A comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(self.command, key);
        let items: Vec<T> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::parse(self.command, key, s))
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err(CliError::Usage(format!("{}.{key} is empty", self.command)));
        }
        Ok(items)
    }

    /// The header comment names the RNG stream so a replay can tell when
    /// seeds stop meaning the same draws.
    pub fn to_ini(&self) -> String {
        let mut s = format!("# rng: {}\n", ripple_core::tensor::SeededRng::ALGORITHM);
        for sec in ["global", self.command] {
            s.push_str(&format!("[{sec}]\n"));
            for (k, v) in &self.values[sec] {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        }
        s
    }
}

/// `HxW` or a single side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("bad grid size `{s}`: {e}"));
        let (height, width) = match s.split_once(['x', 'X']) {
            Some((h, w)) => (parse(h)?, parse(w)?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if height == 0 || width == 0 {
            return Err(format!("grid size `{s}` has a zero side"));
        }
        Ok(Dims { height, width })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_then_file_then_defaults() {
        let file = parse_ini("[global]\nseed = 5\n[train]\nsteps = 7\nlr = 0.5\n").unwrap();
        let s = Settings::resolve("train", Some(&file), &[], &[("lr", "0.25".into())]).unwrap();
        assert_eq!(s.global::<u64>("seed").unwrap(), 5);
        assert_eq!(s.get::<usize>("steps").unwrap(), 7);
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.25);
        assert_eq!(s.get::<usize>("batch").unwrap(), 16);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse_ini("[train]\nsteps = 1\nwarp = 9\n").is_err());
        assert!(parse_ini("[nope]\n").is_err());
        assert!(parse_ini("steps = 1\n").is_err());
        assert!(parse_ini("[train]\njunk\n").is_err());
    }

    #[test]
    fn serialized_settings_round_trip() {
        let s = Settings::resolve("bench", None, &[("seed", "9".into())], &[("sizes", "64,144,256".into())]).unwrap();
        let text = s.to_ini();
        assert!(text.starts_with("# rng: chacha20"));
        let again = Settings::resolve("bench", Some(&parse_ini(&text).unwrap()), &[], &[]).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn lists_and_dims() {
        let s = Settings::resolve("check", None, &[], &[]).unwrap();
        let sizes: Vec<Dims> = s.list("sizes").unwrap();
        assert_eq!(sizes[2], Dims { height: 9, width: 9 });
        assert_eq!("7".parse::<Dims>().unwrap(), Dims { height: 7, width: 7 });
        assert!("0x3".parse::<Dims>().is_err());
        let bad = Settings::resolve("check", None, &[], &[("trials", "many".into())]).unwrap();
        assert!(bad.get::<usize>("trials").is_err());
    }
}
