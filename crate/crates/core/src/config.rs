//! Run configuration: an INI file with `[model]`, `[aggregator]`, `[prep]`,
//! `[train]` and `[paths]` sections. Every key is optional and defaults to
//! the reference setup; unknown sections and keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::aggregation::{AggregatorKind, AggregatorSpec, NilReduction};
use crate::error::{Error, Result};
use crate::model::{MapSpec, ModelSpec};
use crate::network::{Activation, AdaptivePool, ConvUnitSpec, FeatureMode, HeadKind, NetworkSpec};
use crate::prep::PrepSpec;
use crate::signal::{CropMode, CropSpec};
use crate::training::{AdamConfig, Rebalance, TrainConfig};

/// Environment variable that replaces `[train] seed`.
pub const SEED_ENV: &str = "LPANET_SEED";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub prep: PrepSpec,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::reference(),
            prep: PrepSpec::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

const SECTIONS: [(&str, &[&str]); 5] = [
    (
        "model",
        &[
            "in_channels",
            "conv_units",
            "activation",
            "fc_nodes",
            "head",
            "classes",
            "mode",
            "adaptive_pool",
        ],
    ),
    (
        "aggregator",
        &[
            "kind",
            "m1",
            "m2",
            "weights",
            "weights_trainable",
            "p1",
            "p2",
            "r",
            "r_trainable",
            "a",
            "b_shift",
            "b_trainable",
            "prioritized",
            "nil_reduction",
            "clamp_to_n",
            "attention_hidden",
        ],
    ),
    (
        "prep",
        &[
            "resample_hz",
            "bandpass",
            "band_lo_hz",
            "band_hi_hz",
            "target_frames",
            "noise_salt",
            "crop_mode",
            "crop_window",
            "crop_stride",
            "crop_count",
            "drop_tail",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "learning_rate",
            "adam_beta1",
            "adam_beta2",
            "adam_eps",
            "seed",
            "rebalance",
            "offset",
            "positive_class",
        ],
    ),
    ("paths", &["train", "valid", "test", "checkpoint", "log"]),
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Typed view of one section; every lookup is by a key from [`SECTIONS`].
struct Section<'a> {
    name: &'static str,
    props: Option<&'a ini::Properties>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| cfg_err(format!("[{}] {key}: cannot parse `{v}`", self.name))),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(cfg_err(format!(
                "[{}] {key}: expected true or false, got `{v}`",
                self.name
            ))),
        }
    }

    /// `none` maps to `None`.
    fn optional<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| cfg_err(format!("[{}] {key}: cannot parse `{v}`", self.name))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| cfg_err(format!("[{}] {key}: cannot parse `{}` in `{v}`", self.name, t.trim())))
                })
                .collect(),
        }
    }

    fn named<T>(&self, key: &str, default: T, lookup: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => lookup(v).ok_or_else(|| cfg_err(format!("[{}] {key}: unknown value `{v}`", self.name))),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Option<PathBuf> {
        self.raw(key).filter(|v| !v.is_empty()).map(|v| base.join(v))
    }
}

fn parse_conv_units(text: &str, activation: Activation) -> Result<Vec<ConvUnitSpec>> {
    text.split(',')
        .map(|u| {
            let dims: Vec<usize> = u
                .trim()
                .split('x')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| cfg_err(format!("[model] conv_units: `{}` is not KERNELxPOOLxMAPS", u.trim())))?;
            match dims[..] {
                [k, p, m] => Ok(ConvUnitSpec {
                    activation,
                    ..ConvUnitSpec::new(k, p, m)
                }),
                _ => Err(cfg_err(format!(
                    "[model] conv_units: `{}` is not KERNELxPOOLxMAPS",
                    u.trim()
                ))),
            }
        })
        .collect()
}

fn crop_mode_name(mode: CropMode) -> &'static str {
    match mode {
        CropMode::Overlapping => "overlapping",
        CropMode::NonOverlapping => "non_overlapping",
        CropMode::FixedCount(_) => "fixed_count",
    }
}

impl RunConfig {
    /// Parses configuration text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| cfg_err(format!("line {}: {}", e.line, e.msg)))?;
        for (section, props) in ini.iter() {
            let Some(name) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(cfg_err(format!("key `{key}` appears outside any section")));
                }
                continue;
            };
            let known = SECTIONS
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| cfg_err(format!("unknown section [{name}]")))?;
            if let Some((key, _)) = props.iter().find(|(k, _)| !known.1.contains(k)) {
                return Err(cfg_err(format!("unknown key `{key}` in [{name}]")));
            }
        }
        let section = |name: &'static str| Section {
            name,
            props: ini.section(Some(name)),
        };
        let d = RunConfig::default();

        let m = section("model");
        let dn = &d.model.network;
        let activation = m.named("activation", Activation::Relu, Activation::from_name)?;
        let conv_units = match m.raw("conv_units") {
            Some(text) => parse_conv_units(text, activation)?,
            None => dn
                .conv_units
                .iter()
                .map(|u| ConvUnitSpec { activation, ..*u })
                .collect(),
        };
        let network = NetworkSpec {
            in_channels: m.parse("in_channels", dn.in_channels)?,
            conv_units,
            fc_nodes: m.parse("fc_nodes", dn.fc_nodes)?,
            head: m.named("head", dn.head, HeadKind::from_name)?,
            classes: m.parse("classes", dn.classes)?,
            mode: m.named("mode", dn.mode, FeatureMode::from_name)?,
            adaptive_pool: m.named("adaptive_pool", dn.adaptive_pool, AdaptivePool::from_name)?,
        };

        let a = section("aggregator");
        let kind = a.named("kind", AggregatorKind::TopkWeighted, AggregatorKind::from_name)?;
        let da = AggregatorSpec::new(kind);
        let aggregator = AggregatorSpec {
            kind,
            m1: a.parse("m1", da.m1)?,
            m2: a.parse("m2", da.m2)?,
            weights: a.list("weights", da.weights)?,
            weights_trainable: a.bool("weights_trainable", da.weights_trainable)?,
            p1: a.parse("p1", da.p1)?,
            p2: a.parse("p2", da.p2)?,
            r: a.parse("r", da.r)?,
            r_trainable: a.bool("r_trainable", da.r_trainable)?,
            a: a.parse("a", da.a)?,
            b_shift: a.parse("b_shift", da.b_shift)?,
            b_trainable: a.bool("b_trainable", da.b_trainable)?,
            prioritized: a.list("prioritized", da.prioritized)?,
            nil_reduction: a.named("nil_reduction", da.nil_reduction, NilReduction::from_name)?,
            clamp_to_n: a.bool("clamp_to_n", da.clamp_to_n)?,
            attention_hidden: a.parse("attention_hidden", da.attention_hidden)?,
        };

        let p = section("prep");
        let dc = d.model.maps[0].crop;
        let (dlo, dhi) = d.prep.band_hz.expect("default band is set");
        let band_hz = if p.bool("bandpass", true)? {
            Some((p.parse("band_lo_hz", dlo)?, p.parse("band_hi_hz", dhi)?))
        } else {
            None
        };
        let prep = PrepSpec {
            resample_hz: p.optional("resample_hz", d.prep.resample_hz)?,
            band_hz,
            target_frames: p.optional("target_frames", d.prep.target_frames)?,
            noise_salt: p.parse("noise_salt", d.prep.noise_salt)?,
        };
        let window = p.parse("crop_window", dc.window)?;
        let stride = p.parse("crop_stride", dc.stride)?;
        let drop_tail = p.bool("drop_tail", dc.drop_tail)?;
        let crop = match p.raw("crop_mode").unwrap_or("overlapping") {
            "overlapping" => CropSpec::overlapping(window, stride, drop_tail),
            "non_overlapping" => CropSpec {
                mode: CropMode::NonOverlapping,
                ..CropSpec::overlapping(window, stride, drop_tail)
            },
            "fixed_count" => CropSpec {
                mode: CropMode::FixedCount(p.parse("crop_count", 8)?),
                ..CropSpec::overlapping(window, stride, drop_tail)
            },
            "whole" => {
                let frames = prep
                    .target_frames
                    .ok_or_else(|| cfg_err("[prep] crop_mode = whole needs target_frames"))?;
                CropSpec::whole(frames)
            }
            other => return Err(cfg_err(format!("[prep] crop_mode: unknown value `{other}`"))),
        };

        let t = section("train");
        let dt = &d.train;
        let train = TrainConfig {
            epochs: t.parse("epochs", dt.epochs)?,
            batch_size: t.parse("batch_size", dt.batch_size)?,
            adam: AdamConfig {
                learning_rate: t.parse("learning_rate", dt.adam.learning_rate)?,
                beta1: t.parse("adam_beta1", dt.adam.beta1)?,
                beta2: t.parse("adam_beta2", dt.adam.beta2)?,
                eps: t.parse("adam_eps", dt.adam.eps)?,
            },
            seed: t.parse("seed", dt.seed)?,
            rebalance: t.named("rebalance", dt.rebalance, |v| match v {
                "none" => Some(Rebalance::None),
                "over_under" => Some(Rebalance::OverUnder),
                _ => None,
            })?,
            offset: t.parse("offset", dt.offset)?,
            positive_class: t.parse("positive_class", dt.positive_class)?,
        };

        let ps = section("paths");
        let paths = PathsConfig {
            train: ps.path("train", base_dir),
            valid: ps.path("valid", base_dir),
            test: ps.path("test", base_dir),
            checkpoint: ps.path("checkpoint", base_dir),
            log: ps.path("log", base_dir),
        };

        let cfg = RunConfig {
            model: ModelSpec {
                network,
                maps: vec![MapSpec { crop, aggregator }],
            },
            prep,
            train,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every structural check, reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        let as_cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(as_cfg)?;
        self.train.validate().map_err(as_cfg)?;
        if let Some(frames) = self.prep.target_frames {
            for m in &self.model.maps {
                m.crop.starts(frames).map_err(as_cfg)?;
            }
        }
        if self.train.positive_class >= self.model.network.classes {
            return Err(cfg_err(format!(
                "[train] positive_class {} out of range for {} classes",
                self.train.positive_class, self.model.network.classes
            )));
        }
        Ok(())
    }

    /// Reads `path`, then applies [`SEED_ENV`] if it is set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("{SEED_ENV}: `{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Configuration text that parses back to `self` (paths are written as given).
    pub fn render(&self) -> String {
        let n = &self.model.network;
        let map = &self.model.maps[0];
        let a = &map.aggregator;
        let list = |v: &[String]| v.join(",");
        let mut out = String::new();
        let mut w = |s: String| out.push_str(&s);

        w("[model]\n".into());
        w(format!("in_channels = {}\n", n.in_channels));
        let units: Vec<String> = n
            .conv_units
            .iter()
            .map(|u| format!("{}x{}x{}", u.kernel_size, u.pool_size, u.out_maps))
            .collect();
        w(format!("conv_units = {}\n", list(&units)));
        let act = n.conv_units.first().map_or(Activation::Relu, |u| u.activation);
        w(format!("activation = {}\n", act.name()));
        w(format!("fc_nodes = {}\n", n.fc_nodes));
        w(format!("head = {}\n", n.head.name()));
        w(format!("classes = {}\n", n.classes));
        w(format!("mode = {}\n", n.mode.name()));
        w(format!("adaptive_pool = {}\n", n.adaptive_pool.name()));

        w("\n[aggregator]\n".into());
        w(format!("kind = {}\n", a.kind.name()));
        w(format!("m1 = {}\nm2 = {}\n", a.m1, a.m2));
        let weights: Vec<String> = a.weights.iter().map(|v| format!("{v:?}")).collect();
        w(format!("weights = {}\n", list(&weights)));
        w(format!("weights_trainable = {}\n", a.weights_trainable));
        w(format!("p1 = {:?}\np2 = {:?}\n", a.p1, a.p2));
        w(format!("r = {:?}\nr_trainable = {}\n", a.r, a.r_trainable));
        w(format!("a = {:?}\n", a.a));
        w(format!("b_shift = {:?}\nb_trainable = {}\n", a.b_shift, a.b_trainable));
        let il: Vec<String> = a.prioritized.iter().map(|c| c.to_string()).collect();
        w(format!("prioritized = {}\n", list(&il)));
        w(format!("nil_reduction = {}\n", a.nil_reduction.name()));
        w(format!("clamp_to_n = {}\n", a.clamp_to_n));
        w(format!("attention_hidden = {}\n", a.attention_hidden));

        w("\n[prep]\n".into());
        let opt_f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        w(format!("resample_hz = {}\n", opt_f(self.prep.resample_hz)));
        w(format!("bandpass = {}\n", self.prep.band_hz.is_some()));
        if let Some((lo, hi)) = self.prep.band_hz {
            w(format!("band_lo_hz = {lo:?}\nband_hi_hz = {hi:?}\n"));
        }
        w(format!(
            "target_frames = {}\n",
            self.prep.target_frames.map_or("none".to_string(), |v| v.to_string())
        ));
        w(format!("noise_salt = {}\n", self.prep.noise_salt));
        w(format!("crop_mode = {}\n", crop_mode_name(map.crop.mode)));
        if let CropMode::FixedCount(k) = map.crop.mode {
            w(format!("crop_count = {k}\n"));
        }
        w(format!(
            "crop_window = {}\ncrop_stride = {}\n",
            map.crop.window, map.crop.stride
        ));
        w(format!("drop_tail = {}\n", map.crop.drop_tail));

        let t = &self.train;
        w("\n[train]\n".into());
        w(format!("epochs = {}\nbatch_size = {}\n", t.epochs, t.batch_size));
        w(format!("learning_rate = {:?}\n", t.adam.learning_rate));
        w(format!(
            "adam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\n",
            t.adam.beta1, t.adam.beta2, t.adam.eps
        ));
        w(format!("seed = {}\n", t.seed));
        let rb = match t.rebalance {
            Rebalance::None => "none",
            Rebalance::OverUnder => "over_under",
        };
        w(format!(
            "rebalance = {rb}\noffset = {}\npositive_class = {}\n",
            t.offset, t.positive_class
        ));

        let p = &self.paths;
        let entries = [
            ("train", &p.train),
            ("valid", &p.valid),
            ("test", &p.test),
            ("checkpoint", &p.checkpoint),
            ("log", &p.log),
        ];
        if entries.iter().any(|(_, v)| v.is_some()) {
            w("\n[paths]\n".into());
            for (k, v) in entries {
                if let Some(v) = v {
                    w(format!("{k} = {}\n", v.display()));
                }
            }
        }
        out
    }
}
