//! Run configuration: a plain-text `key = value` file with `[section]`
//! headers, plus `--set key=value` overrides.
//!
//! ```text
//! # comments run to end of line
//! [train]
//! epochs = 60
//! lr = 0.1
//! ```
//!
//! Keys may also be written fully qualified (`train.epochs = 60`) or, when
//! the name is unique across sections, bare (`epochs = 60`) outside any
//! section and in overrides. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tsa::data::{gen_blobs, gen_spirals_with_turns, load_path, AugmentPolicy, Dataset};
use tsa::distill::{DistillConfig, PeerGradient};
use tsa::nn::{BlockSpec, NetworkSpec};
use tsa::trainer::{LrDrop, TrainConfig};
use tsa::tree::{EnsembleMode, Method, Topology, TreeSpec};

use crate::CliError;

/// One accepted configuration key.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

impl Key {
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.section, self.name)
    }
}

const fn key(section: &'static str, name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        section,
        name,
        default,
        help,
    }
}

/// Every key the parser accepts. `--help` of the config-driven commands is
/// rendered from this table:
///
/// ```
/// let help = tsa_cli::render_help("train");
/// for key in tsa_cli::config::KEYS {
///     assert!(help.contains(&key.qualified()), "{} missing", key.qualified());
/// }
/// ```
pub const KEYS: &[Key] = &[
    key("data", "source", "spirals", "spirals | blobs | file"),
    key("data", "n_per_class", "500", "generated training points per class"),
    key("data", "test_n_per_class", "300", "generated test points per class"),
    key("data", "classes", "auto", "class count; auto = 3 for generators, largest label for files"),
    key("data", "noise", "0.1", "spirals: coordinate noise std"),
    key("data", "turns", "1.0", "spirals: turns per arm"),
    key("data", "dim", "2", "blobs: feature dimension"),
    key("data", "separation", "3.0", "blobs: distance between class centres"),
    key("data", "train_seed", "100", "seed of the generated training set"),
    key("data", "test_seed", "200", "seed of the generated test set"),
    key("data", "train_path", "", "file source: training set (.csv or raw TSAD)"),
    key("data", "test_path", "", "file source: test set (.csv or raw TSAD)"),
    key("model", "width", "32", "MLP hidden width"),
    key("model", "depth", "3", "MLP block count"),
    key("model", "blocks", "", "explicit blocks separated by `|`, e.g. `linear 2 8, relu | linear 8 3`; overrides width and depth"),
    key("tree", "method", "tsa", "baseline | tsa | one_style | full_dup"),
    key("tree", "m", "2", "children per internal node when method = tsa"),
    key("tree", "branching", "", "children per depth, e.g. `1,2,2`"),
    key("tree", "topology", "", "nested parentheses, e.g. `((()())(()))`"),
    key("train", "epochs", "60", "training epochs"),
    key("train", "batch_size", "128", "mini-batch size"),
    key("train", "lr", "0.1", "initial learning rate"),
    key("train", "momentum", "0.9", "SGD momentum"),
    key("train", "weight_decay", "0.0005", "L2 weight decay"),
    key("train", "lr_drops", "0.5:0.1, 0.75:0.1", "`fraction:factor` pairs, or `none`"),
    key("train", "seed", "0", "initialization and batch-order seed"),
    key("train", "hflip", "false", "image augmentation: random horizontal flips"),
    key("train", "shift", "0", "image augmentation: random shifts up to this many pixels"),
    key("train", "ensemble", "probs", "ensemble rule for reported accuracy: probs | logits"),
    key("distill", "alpha", "0.5", "weight of the distillation term"),
    key("distill", "temperature", "3.0", "distillation temperature"),
    key("distill", "peer_gradient", "detached", "detached | coupled"),
    key("output", "dir", "out", "directory for metrics, summary and snapshot"),
];

fn find(section: Option<&str>, name: &str) -> Result<&'static Key, CliError> {
    let (section, name) = match (section, name.split_once('.')) {
        (_, Some((s, n))) => (Some(s), n),
        (s, None) => (s, name),
    };
    let mut matches = KEYS.iter().filter(|k| k.name == name && section.is_none_or(|s| s == k.section));
    match (matches.next(), matches.next()) {
        (Some(k), None) => Ok(k),
        (Some(_), Some(_)) => Err(CliError::Usage(format!("ambiguous key `{name}`; qualify it with a section"))),
        (None, _) => Err(CliError::Usage(match section {
            Some(s) => format!("unknown key `{name}` in section [{s}]"),
            None => format!("unknown key `{name}`"),
        })),
    }
}

/// Validated key/value pairs, keyed by qualified name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("{origin}:{}: {msg}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = find(section.as_deref(), k.trim()).map_err(|e| at(e.to_string()))?;
            cfg.values.insert(key.qualified(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not `key=value`")))?;
        let key = find(None, k.trim())?;
        self.values.insert(key.qualified(), v.trim().to_string());
        Ok(())
    }

    pub fn is_set(&self, qualified: &str) -> bool {
        self.values.contains_key(qualified)
    }

    /// The configured value, or the registry default.
    pub fn get(&self, qualified: &str) -> &str {
        self.values.get(qualified).map(String::as_str).unwrap_or_else(|| {
            KEYS.iter()
                .find(|k| k.qualified() == qualified)
                .unwrap_or_else(|| panic!("`{qualified}` is not a registered key"))
                .default
        })
    }

    fn typed<T: FromStr>(&self, qualified: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(qualified);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("{qualified} = `{raw}`: {e}")))
    }

    /// Every key with its effective value, in config-file syntax.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            if k.section != section {
                section = k.section;
                let _ = writeln!(out, "{}[{section}]", if out.is_empty() { "" } else { "\n" });
            }
            let _ = writeln!(out, "{} = {}", k.name, self.get(&k.qualified()));
        }
        out
    }
}

/// Human-readable table of [`KEYS`].
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (set in the file or with --set key=value):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "unset" } else { k.default };
        let _ = writeln!(out, "  {:<26} {} [default: {default}]", k.qualified(), k.help);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Spirals {
        n_per_class: usize,
        test_n_per_class: usize,
        classes: usize,
        noise: f64,
        turns: f64,
        train_seed: u64,
        test_seed: u64,
    },
    Blobs {
        n_per_class: usize,
        test_n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        train_seed: u64,
        test_seed: u64,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
        classes: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        Ok(match self {
            DataSource::Spirals {
                n_per_class,
                test_n_per_class,
                classes,
                noise,
                turns,
                train_seed,
                test_seed,
            } => (
                gen_spirals_with_turns(*n_per_class, *classes, *noise, *turns, *train_seed)?,
                gen_spirals_with_turns(*test_n_per_class, *classes, *noise, *turns, *test_seed)?,
            ),
            DataSource::Blobs {
                n_per_class,
                test_n_per_class,
                classes,
                dim,
                separation,
                train_seed,
                test_seed,
            } => (
                gen_blobs(*n_per_class, *classes, *dim, *separation, *train_seed)?,
                gen_blobs(*test_n_per_class, *classes, *dim, *separation, *test_seed)?,
            ),
            DataSource::Files { train, test, classes } => {
                let train = load_path(train, *classes)?;
                let classes = classes.unwrap_or(train.classes());
                (train, load_path(test, Some(classes))?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelChoice {
    Mlp { width: usize, depth: usize },
    Blocks(Vec<BlockSpec>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeChoice {
    Method(Method),
    Balanced(usize),
    Branching(Vec<usize>),
    Explicit(Vec<Topology>),
}

/// Fully typed configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelChoice,
    pub tree: TreeChoice,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| CliError::Usage(format!("{what}: `{s}`: {e}"))))
        .collect()
}

fn parse_drops(raw: &str) -> Result<Vec<LrDrop>, CliError> {
    if raw.trim().is_empty() || raw.trim() == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|pair| {
            let bad = || CliError::Usage(format!("train.lr_drops: `{}` is not `fraction:factor`", pair.trim()));
            let (at, factor) = pair.split_once(':').ok_or_else(bad)?;
            Ok(LrDrop {
                at: at.trim().parse().map_err(|_| bad())?,
                factor: factor.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn existing(raw: &str, key: &str) -> Result<PathBuf, CliError> {
    if raw.is_empty() {
        return Err(CliError::Usage(format!("{key} is required when data.source = file")));
    }
    let path = PathBuf::from(raw);
    if !path.is_file() {
        return Err(CliError::Usage(format!("{key}: no such file {}", path.display())));
    }
    Ok(path)
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let classes = match raw.get("data.classes") {
            "auto" => None,
            _ => Some(raw.typed::<usize>("data.classes")?),
        };
        let data = match raw.get("data.source") {
            "spirals" => DataSource::Spirals {
                n_per_class: raw.typed("data.n_per_class")?,
                test_n_per_class: raw.typed("data.test_n_per_class")?,
                classes: classes.unwrap_or(3),
                noise: raw.typed("data.noise")?,
                turns: raw.typed("data.turns")?,
                train_seed: raw.typed("data.train_seed")?,
                test_seed: raw.typed("data.test_seed")?,
            },
            "blobs" => DataSource::Blobs {
                n_per_class: raw.typed("data.n_per_class")?,
                test_n_per_class: raw.typed("data.test_n_per_class")?,
                classes: classes.unwrap_or(3),
                dim: raw.typed("data.dim")?,
                separation: raw.typed("data.separation")?,
                train_seed: raw.typed("data.train_seed")?,
                test_seed: raw.typed("data.test_seed")?,
            },
            "file" => DataSource::Files {
                train: existing(raw.get("data.train_path"), "data.train_path")?,
                test: existing(raw.get("data.test_path"), "data.test_path")?,
                classes,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "data.source = `{other}`: expected spirals, blobs or file"
                )))
            }
        };

        let model = match raw.get("model.blocks").trim() {
            "" => ModelChoice::Mlp {
                width: raw.typed("model.width")?,
                depth: raw.typed("model.depth")?,
            },
            blocks => ModelChoice::Blocks(
                blocks
                    .split('|')
                    .map(|b| b.trim().parse::<BlockSpec>())
                    .collect::<tsa::Result<_>>()?,
            ),
        };

        let (branching, topology) = (raw.get("tree.branching").trim(), raw.get("tree.topology").trim());
        let explicit_forms = [!branching.is_empty(), !topology.is_empty(), raw.is_set("tree.method")];
        if explicit_forms.iter().filter(|&&b| b).count() > 1 {
            return Err(CliError::Usage(
                "set at most one of tree.method, tree.branching and tree.topology".into(),
            ));
        }
        let tree = if !topology.is_empty() {
            TreeChoice::Explicit(Topology::parse_forest(topology)?)
        } else if !branching.is_empty() {
            TreeChoice::Branching(parse_list(branching, "tree.branching")?)
        } else {
            let method: Method = raw.typed("tree.method")?;
            let m: usize = raw.typed("tree.m")?;
            if method == Method::Tsa && m != 2 {
                TreeChoice::Balanced(m)
            } else {
                TreeChoice::Method(method)
            }
        };

        let train = TrainConfig {
            epochs: raw.typed("train.epochs")?,
            batch_size: raw.typed("train.batch_size")?,
            lr0: raw.typed("train.lr")?,
            momentum: raw.typed("train.momentum")?,
            weight_decay: raw.typed("train.weight_decay")?,
            lr_drops: parse_drops(raw.get("train.lr_drops"))?,
            seed: raw.typed("train.seed")?,
            distill: DistillConfig {
                alpha: raw.typed("distill.alpha")?,
                temperature: raw.typed("distill.temperature")?,
                peer_gradient: raw.typed::<PeerGradient>("distill.peer_gradient")?,
            },
            augment: AugmentPolicy {
                hflip: raw.typed("train.hflip")?,
                shift: raw.typed("train.shift")?,
            },
            ensemble: raw.typed::<EnsembleMode>("train.ensemble")?,
        };
        train.validate()?;
        Ok(Self {
            data,
            model,
            tree,
            train,
            out_dir: PathBuf::from(raw.get("output.dir")),
        })
    }

    /// Base network for a dataset: input shape and class count come from
    /// the data.
    pub fn base_spec(&self, data: &Dataset) -> Result<NetworkSpec, CliError> {
        let input = data.feature_shape().to_vec();
        Ok(match &self.model {
            ModelChoice::Mlp { width, depth } => {
                if input.len() != 1 {
                    return Err(CliError::Usage(format!(
                        "MLP models need flat features, got shape {input:?}; use model.blocks"
                    )));
                }
                NetworkSpec::mlp(input[0], *width, *depth, data.classes())?
            }
            ModelChoice::Blocks(blocks) => {
                let spec = NetworkSpec::new(input, blocks.clone())?;
                if spec.classes() < data.classes() {
                    return Err(CliError::Usage(format!(
                        "model predicts {} classes but the data has {}",
                        spec.classes(),
                        data.classes()
                    )));
                }
                spec
            }
        })
    }

    pub fn tree_spec(&self, base: &NetworkSpec) -> Result<TreeSpec, CliError> {
        Ok(match &self.tree {
            TreeChoice::Method(m) => m.build(base)?,
            TreeChoice::Balanced(m) => TreeSpec::balanced(base.clone(), *m, base.depth())?,
            TreeChoice::Branching(b) => TreeSpec::from_branching(base.clone(), b)?,
            TreeChoice::Explicit(t) => TreeSpec::explicit(base.clone(), t)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_bare_and_qualified_keys() {
        let raw = RawConfig::parse(
            "epochs = 5\n[distill]\nalpha = 0.25 # comment\n\n[train]\ndistill.temperature = 2\n",
            "t",
        )
        .unwrap();
        assert_eq!(raw.get("train.epochs"), "5");
        assert_eq!(raw.get("distill.alpha"), "0.25");
        assert_eq!(raw.get("distill.temperature"), "2");
        assert_eq!(raw.get("train.lr"), "0.1");
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RawConfig::parse("[distill]\nalhpa = 0.5\n", "x.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alhpa") && msg.contains("x.cfg:2"), "{msg}");
        assert!(RawConfig::parse("[nope]\n", "x").is_err());
        assert!(RawConfig::default().set("nonsense=1").is_err());
        assert!(RawConfig::default().set("seed").is_err());
    }

    #[test]
    fn every_bare_name_is_unique() {
        for k in KEYS {
            assert!(find(None, k.name).is_ok(), "{} is ambiguous", k.name);
        }
    }

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.tree, TreeChoice::Method(Method::Tsa));
        let (train, test) = cfg.data.load().unwrap();
        assert_eq!((train.len(), test.len()), (1500, 900));
        let base = cfg.base_spec(&train).unwrap();
        assert_eq!(cfg.tree_spec(&base).unwrap().leaf_count(), 4);
    }

    #[test]
    fn render_round_trips() {
        let mut raw = RawConfig::default();
        raw.set("alpha=0.3").unwrap();
        raw.set("train.lr_drops=none").unwrap();
        let back = RawConfig::parse(&raw.render(), "rendered").unwrap();
        assert_eq!(RunConfig::from_raw(&back).unwrap(), RunConfig::from_raw(&raw).unwrap());
    }

    #[test]
    fn tree_forms() {
        let mut raw = RawConfig::default();
        raw.set("topology=((()())(()))").unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        let base = NetworkSpec::mlp(2, 4, 3, 3).unwrap();
        assert_eq!(cfg.tree_spec(&base).unwrap().leaf_count(), 3);
        raw.set("branching=1,2,2").unwrap();
        assert!(RunConfig::from_raw(&raw).is_err());

        let mut raw = RawConfig::default();
        raw.set("m=3").unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.tree_spec(&base).unwrap().leaf_count(), 9);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for set in ["epochs=many", "lr_drops=0.5", "peer_gradient=sideways", "source=mnist", "momentum=1.5"] {
            let mut raw = RawConfig::default();
            raw.set(set).unwrap();
            assert!(RunConfig::from_raw(&raw).is_err(), "{set}");
        }
        let mut raw = RawConfig::default();
        raw.set("source=file").unwrap();
        raw.set("train_path=/definitely/missing.csv").unwrap();
        raw.set("test_path=/definitely/missing.csv").unwrap();
        assert!(RunConfig::from_raw(&raw).unwrap_err().to_string().contains("missing.csv"));
    }
}
