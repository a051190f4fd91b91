//! Experiment configuration: flat INI sections of `key = value` lines.
//!
//! ```text
//! [stream]
//! kind = msfir-analog
//! n_tasks = 5
//! seed = 1
//!
//! [model]
//! epochs = 20
//!
//! [gate]
//! V = 0.5
//!
//! [analysis]
//! family = linear
//!
//! [output]
//! dir = runs/msfir
//! ```
//!
//! Every section must be present; keys inside a section fall back to their
//! defaults, except the stream's `kind`, `n_tasks` and `seed`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use limix_core::gate::GateConfig;
use limix_core::limix::ModelConfig;
use limix_core::risk::{Budget, Family, HypothesisClass, Loss};
use limix_core::task_streams::StreamConfig;

use crate::error::CliError;

pub const SECTIONS: [&str; 5] = ["stream", "model", "gate", "analysis", "output"];

const MODEL_KEYS: [&str; 10] = [
    "hidden",
    "d_z",
    "lr",
    "epochs",
    "batch_size",
    "n_mc_train",
    "n_mc_eval",
    "seed",
    "student_epochs",
    "student_replay",
];
const GATE_KEYS: [&str; 3] = ["a", "V", "n_G"];
const ANALYSIS_KEYS: [&str; 8] = ["family", "width", "loss", "restarts", "steps", "lr", "n_eval", "orders"];
const OUTPUT_KEYS: [&str; 1] = ["dir"];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw sections in file order of appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split(['#', ';']).next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(format!("line {line}: unterminated section header `{s}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::config(format!("line {line}: unknown section `[{name}]`")));
                }
                if ini.sections.contains_key(name) {
                    return Err(CliError::config(format!("line {line}: section `[{name}]` appears twice")));
                }
                ini.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {line}: expected `key = value`, got `{s}`")))?;
            let section = current
                .as_ref()
                .ok_or_else(|| CliError::config(format!("line {line}: key `{}` outside any section", k.trim())))?;
            let key = k.trim().to_string();
            let known: &[&str] = match section.as_str() {
                "stream" => &StreamConfig::KEYS,
                "model" => &MODEL_KEYS,
                "gate" => &GATE_KEYS,
                "analysis" => &ANALYSIS_KEYS,
                _ => &OUTPUT_KEYS,
            };
            if !known.contains(&key.as_str()) {
                return Err(CliError::config(format!("line {line}: unknown key `{section}.{key}`")));
            }
            let entries = ini.sections.get_mut(section).expect("section exists");
            if entries.contains_key(&key) {
                return Err(CliError::config(format!("line {line}: key `{section}.{key}` set twice")));
            }
            entries.insert(
                key,
                Entry {
                    value: v.trim().to_string(),
                    line,
                },
            );
        }
        Ok(ini)
    }

    fn section(&self, name: &str) -> Result<&BTreeMap<String, Entry>, CliError> {
        self.sections
            .get(name)
            .ok_or_else(|| CliError::config(format!("missing section `[{name}]`")))
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.section(section)?.get(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| {
                CliError::config(format!(
                    "line {}: cannot parse `{section}.{key}` from `{}`",
                    e.line, e.value
                ))
            }),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Result<Option<&Entry>, CliError> {
        Ok(self.section(section)?.get(key))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub class: HypothesisClass,
    pub budget: Budget,
    pub n_eval: usize,
    /// Task orders for the order-sensitivity table; empty skips it.
    pub orders: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub analysis: AnalysisConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub student_epochs: usize,
    pub student_replay: usize,
}

fn parse_orders(e: &Entry) -> Result<Vec<Vec<usize>>, CliError> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|o| {
            o.split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::config(format!("line {}: `analysis.orders` expects space-separated task indices, got `{o}`", e.line)))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::parse(text)?;
        for s in SECTIONS {
            ini.section(s)?;
        }
        let stream_kv: BTreeMap<String, String> = ini
            .section("stream")?
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect();
        let stream = StreamConfig::from_kv(&stream_kv)?;
        let d = ModelConfig::default();
        let model = ModelConfig {
            hidden: ini.get("model", "hidden", d.hidden)?,
            d_z: ini.get("model", "d_z", d.d_z)?,
            lr: ini.get("model", "lr", d.lr)?,
            epochs: ini.get("model", "epochs", d.epochs)?,
            batch_size: ini.get("model", "batch_size", d.batch_size)?,
            n_mc_train: ini.get("model", "n_mc_train", d.n_mc_train)?,
            n_mc_eval: ini.get("model", "n_mc_eval", d.n_mc_eval)?,
        };
        model.validate()?;
        let g = GateConfig::default();
        let gate = GateConfig {
            a: ini.get("gate", "a", g.a)?,
            v: ini.get("gate", "V", g.v)?,
            n_g: ini.get("gate", "n_G", g.n_g)?,
            n_total: 0,
        };
        gate.validate()?;
        let family = match ini.get("analysis", "family", "linear".to_string())?.as_str() {
            "linear" => Family::Linear,
            "mlp" => Family::Mlp {
                width: ini.get("analysis", "width", 8)?,
            },
            other => return Err(CliError::config(format!("unknown `analysis.family` `{other}` (linear or mlp)"))),
        };
        let loss = match ini.get("analysis", "loss", "zero-one".to_string())?.as_str() {
            "zero-one" => Loss::ZeroOne,
            "bounded-absolute" => Loss::BoundedAbsolute,
            other => return Err(CliError::config(format!("unknown `analysis.loss` `{other}`"))),
        };
        let b = Budget::default();
        let budget = Budget {
            restarts: ini.get("analysis", "restarts", b.restarts)?,
            steps: ini.get("analysis", "steps", b.steps)?,
            lr: ini.get("analysis", "lr", b.lr)?,
        };
        if budget.restarts == 0 || budget.steps == 0 {
            return Err(CliError::config("`analysis.restarts` and `analysis.steps` must be positive"));
        }
        let n_classes = stream.options.n_classes.unwrap_or(match stream.kind {
            limix_core::task_streams::StreamKind::SplitAnalog => 10,
            _ => 2,
        });
        let analysis = AnalysisConfig {
            class: HypothesisClass {
                family,
                d_x: stream.options.d_x,
                n_classes,
                loss,
            },
            budget,
            n_eval: ini.get("analysis", "n_eval", 1000)?,
            orders: match ini.raw("analysis", "orders")? {
                Some(e) => parse_orders(e)?,
                None => Vec::new(),
            },
        };
        let out_dir = ini
            .raw("output", "dir")?
            .map(|e| PathBuf::from(&e.value))
            .ok_or_else(|| CliError::config("missing key `output.dir`"))?;
        Ok(Self {
            stream,
            model,
            gate,
            analysis,
            out_dir,
            seed: ini.get("model", "seed", 0)?,
            student_epochs: ini.get("model", "student_epochs", 20)?,
            student_replay: ini.get("model", "student_replay", 1000)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `section.key = value` on top of the configuration, as a sweep
    /// does.
    pub fn with_param(&self, param: &str, value: &str) -> Result<Self, CliError> {
        let (section, key) = param
            .split_once('.')
            .ok_or_else(|| CliError::config(format!("parameter `{param}` must look like section.key")))?;
        let text = self.to_ini();
        let mut out = String::new();
        let mut in_section = false;
        let mut replaced = false;
        for line in text.lines() {
            if line.starts_with('[') {
                if in_section && !replaced {
                    writeln!(out, "{key} = {value}").expect("string write");
                    replaced = true;
                }
                in_section = line == format!("[{section}]");
            } else if in_section && line.split('=').next().map(str::trim) == Some(key) {
                writeln!(out, "{key} = {value}").expect("string write");
                replaced = true;
                continue;
            }
            writeln!(out, "{line}").expect("string write");
        }
        if in_section && !replaced {
            writeln!(out, "{key} = {value}").expect("string write");
        }
        Self::parse(&out)
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_ini(&self) -> String {
        let mut s = String::from("[stream]\n");
        for (k, v) in self.stream.to_kv() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        let m = &self.model;
        writeln!(
            s,
            "\n[model]\nhidden = {}\nd_z = {}\nlr = {}\nepochs = {}\nbatch_size = {}\nn_mc_train = {}\nn_mc_eval = {}\nseed = {}\nstudent_epochs = {}\nstudent_replay = {}",
            m.hidden, m.d_z, m.lr, m.epochs, m.batch_size, m.n_mc_train, m.n_mc_eval, self.seed, self.student_epochs, self.student_replay
        )
        .expect("string write");
        writeln!(s, "\n[gate]\na = {}\nV = {}\nn_G = {}", self.gate.a, self.gate.v, self.gate.n_g).expect("string write");
        let a = &self.analysis;
        let (family, width) = match a.class.family {
            Family::Linear => ("linear", 8),
            Family::Mlp { width } => ("mlp", width),
        };
        let loss = match a.class.loss {
            Loss::ZeroOne => "zero-one",
            Loss::BoundedAbsolute => "bounded-absolute",
        };
        writeln!(
            s,
            "\n[analysis]\nfamily = {family}\nwidth = {width}\nloss = {loss}\nrestarts = {}\nsteps = {}\nlr = {}\nn_eval = {}",
            a.budget.restarts, a.budget.steps, a.budget.lr, a.n_eval
        )
        .expect("string write");
        if !a.orders.is_empty() {
            let orders: Vec<String> = a
                .orders
                .iter()
                .map(|o| o.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
                .collect();
            writeln!(s, "orders = {}", orders.join(", ")).expect("string write");
        }
        writeln!(s, "\n[output]\ndir = {}", self.out_dir.display()).expect("string write");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[stream]\nkind = msfir-analog\nn_tasks = 5\nseed = 3\n[model]\n[gate]\n[analysis]\n[output]\ndir = out\n";

    #[test]
    fn defaults_fill_empty_sections() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.gate, GateConfig::default());
        assert_eq!(c.analysis.budget, Budget::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&c.to_ini()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_names_line() {
        let text = MINIMAL.replace("[gate]\n", "[gate]\nW = 2\n");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("line 7") && e.contains("gate.W"), "{e}");
    }

    #[test]
    fn missing_section_is_named() {
        let text = MINIMAL.replace("[gate]\n", "");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("[gate]"), "{e}");
    }

    #[test]
    fn bad_value_names_line() {
        let text = MINIMAL.replace("[model]\n", "[model]\nepochs = many\n");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("line 6") && e.contains("model.epochs"), "{e}");
    }

    #[test]
    fn param_override() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.with_param("gate.V", "2").unwrap().gate.v, 2.0);
        assert_eq!(c.with_param("model.epochs", "3").unwrap().model.epochs, 3);
        assert!(c.with_param("gate.W", "1").is_err());
    }

    #[test]
    fn orders_parse() {
        let text = MINIMAL.replace("[analysis]\n", "[analysis]\norders = 0 1 2, 2 1 0\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.analysis.orders, vec![vec![0, 1, 2], vec![2, 1, 0]]);
    }
}
