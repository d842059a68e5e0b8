use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::Activation;
use crate::stn::DEFAULT_ROTATION_WEIGHT;

/// Trunk depth at which a similarity network is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    L2,
    L3,
    L4,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L2, Level::L3, Level::L4];

    /// Number of 2×2 pools applied to the input before this level's map.
    pub fn pools(self) -> u32 {
        match self {
            Level::L2 => 2,
            Level::L3 => 3,
            Level::L4 => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Level::L2 => "l2",
            Level::L3 => "l3",
            Level::L4 => "l4",
        }
    }

    pub fn default_sampler_size(self) -> usize {
        match self {
            Level::L2 => 10,
            Level::L3 => 5,
            Level::L4 => 3,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2" | "2" => Ok(Level::L2),
            "l3" | "3" => Ok(Level::L3),
            "l4" | "4" => Ok(Level::L4),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Channel widths of every block. The defaults are the published sizes;
/// tests shrink them to get a micro-model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub conv1: usize,
    pub trunk: usize,
    pub loc1: usize,
    pub loc3: usize,
    pub head: usize,
    pub head_out: usize,
    pub embed: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            conv1: 32,
            trunk: 96,
            loc1: 32,
            loc3: 128,
            head: 32,
            head_out: 500,
            embed: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Strictly increasing, nonempty.
    pub levels: Vec<Level>,
    pub input_h: usize,
    pub input_w: usize,
    /// Sampler output size f per level, parallel to `levels`.
    pub sampler_sizes: Vec<usize>,
    pub use_stn: bool,
    pub use_ranking_loss: bool,
    /// Weight λ of the inverse-distance term in the similarity score.
    pub lambda: f64,
    pub epsilon: f64,
    /// Contrastive margin α.
    pub margin: f64,
    pub rotation_weight: f64,
    pub activation: Activation,
    pub widths: Widths,
    /// Per-channel input standardization.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_levels(&[Level::L2, Level::L3])
    }
}

impl ModelConfig {
    pub fn with_levels(levels: &[Level]) -> Self {
        ModelConfig {
            levels: levels.to_vec(),
            input_h: 160,
            input_w: 60,
            sampler_sizes: levels.iter().map(|l| l.default_sampler_size()).collect(),
            use_stn: true,
            use_ranking_loss: true,
            lambda: 0.2,
            epsilon: 1e-4,
            margin: 1.0,
            rotation_weight: DEFAULT_ROTATION_WEIGHT,
            activation: Activation::Relu,
            widths: Widths::default(),
            input_mean: [0.0; 3],
            input_std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels.is_empty() {
            return bad("at least one level is required".into());
        }
        if !self.levels.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("levels must be strictly increasing, got {:?}", self.levels));
        }
        if self.sampler_sizes.len() != self.levels.len() || self.sampler_sizes.contains(&0) {
            return bad(format!("need one positive sampler size per level, got {:?}", self.sampler_sizes));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return bad("input extents must be positive".into());
        }
        for &l in &self.levels {
            let (h, _) = self.level_hw(l);
            if h < 4 {
                return bad(format!("feature map at {l} is only {h} rows; stripes need at least 4"));
            }
        }
        let w = &self.widths;
        if [w.conv1, w.trunk, w.loc1, w.loc3, w.head, w.head_out, w.embed].contains(&0) {
            return bad("widths must be positive".into());
        }
        if !(self.margin > 0.0 && self.epsilon > 0.0 && self.lambda >= 0.0 && self.rotation_weight >= 0.0) {
            return bad("margin and epsilon must be positive, lambda and rotation weight non-negative".into());
        }
        if self.input_std.iter().any(|&s| !(s > 0.0)) {
            return bad("input std must be positive".into());
        }
        Ok(())
    }

    pub fn deepest(&self) -> Level {
        *self.levels.last().expect("validated nonempty")
    }

    pub fn has_level(&self, l: Level) -> bool {
        self.levels.contains(&l)
    }

    pub fn sampler_size(&self, l: Level) -> usize {
        let i = self.levels.iter().position(|&x| x == l).expect("level in config");
        self.sampler_sizes[i]
    }

    /// Spatial size of the trunk map at `l`.
    pub fn level_hw(&self, l: Level) -> (usize, usize) {
        pooled(self.input_h, self.input_w, l.pools())
    }

    /// Spatial size of the fused similarity maps.
    pub fn fused_hw(&self) -> (usize, usize) {
        self.level_hw(Level::L4)
    }

    pub fn fused_channels(&self) -> usize {
        6 * self.widths.trunk * self.levels.len()
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let levels: Vec<_> = self.levels.iter().map(|l| l.tag()).collect();
        let sizes: Vec<_> = self.sampler_sizes.iter().map(|f| f.to_string()).collect();
        let w = &self.widths;
        let join3 = |a: &[f64; 3]| format!("{:?},{:?},{:?}", a[0], a[1], a[2]);
        let lines = [
            ("levels", levels.join(",")),
            ("input_h", self.input_h.to_string()),
            ("input_w", self.input_w.to_string()),
            ("sampler_sizes", sizes.join(",")),
            ("use_stn", self.use_stn.to_string()),
            ("use_ranking_loss", self.use_ranking_loss.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("margin", format!("{:?}", self.margin)),
            ("rotation_weight", format!("{:?}", self.rotation_weight)),
            ("activation", self.activation.name().to_string()),
            (
                "widths",
                format!(
                    "{},{},{},{},{},{},{}",
                    w.conv1, w.trunk, w.loc1, w.loc3, w.head, w.head_out, w.embed
                ),
            ),
            ("input_mean", join3(&self.input_mean)),
            ("input_std", join3(&self.input_std)),
        ];
        for (k, v) in lines {
            writeln!(s, "{k}={v}").expect("write to string");
        }
        s
    }

    /// Inverse of [`to_text`](Self::to_text). Every key is required and
    /// unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {k:?}")));
            }
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::Config(format!("missing key {k:?}")));
        let levels = take("levels")?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Level>>>()?;
        let sampler_sizes = parse_list::<usize>("sampler_sizes", &take("sampler_sizes")?)?;
        let widths = parse_list::<usize>("widths", &take("widths")?)?;
        let [conv1, trunk, loc1, loc3, head, head_out, embed] = widths[..] else {
            return Err(Error::Config(format!("widths needs 7 values, got {}", widths.len())));
        };
        let activation_s = take("activation")?;
        let cfg = ModelConfig {
            levels,
            input_h: parse_one("input_h", &take("input_h")?)?,
            input_w: parse_one("input_w", &take("input_w")?)?,
            sampler_sizes,
            use_stn: parse_one("use_stn", &take("use_stn")?)?,
            use_ranking_loss: parse_one("use_ranking_loss", &take("use_ranking_loss")?)?,
            lambda: parse_one("lambda", &take("lambda")?)?,
            epsilon: parse_one("epsilon", &take("epsilon")?)?,
            margin: parse_one("margin", &take("margin")?)?,
            rotation_weight: parse_one("rotation_weight", &take("rotation_weight")?)?,
            activation: Activation::parse(&activation_s)
                .ok_or_else(|| Error::Config(format!("unknown activation {activation_s:?}")))?,
            widths: Widths {
                conv1,
                trunk,
                loc1,
                loc3,
                head,
                head_out,
                embed,
            },
            input_mean: parse_three("input_mean", &take("input_mean")?)?,
            input_std: parse_three("input_std", &take("input_std")?)?,
        };
        if let Some(k) = map.into_keys().next() {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn pooled(h: usize, w: usize, times: u32) -> (usize, usize) {
    (0..times).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
}

fn parse_one<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(|x| parse_one(key, x.trim())).collect()
}

fn parse_three(key: &str, v: &str) -> Result<[f64; 3]> {
    parse_list::<f64>(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs 3 values")))
}
