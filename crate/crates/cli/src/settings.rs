//! Run settings: built-in defaults, then an optional `key = value` file,
//! then command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use node_imgnet::data::NoiseSpec;

/// Every key accepted in a config file, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "data",
    "out",
    "seed",
    "sigma",
    "blind",
    "steps",
    "hidden",
    "channels",
    "patch_size",
    "patches_per_image",
    "augment",
    "eval_fraction",
    "epochs",
    "batch",
    "max_steps",
    "lr",
    "synth_count",
    "synth_size",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: String,
    pub out: PathBuf,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub steps: usize,
    pub hidden: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub augment: bool,
    pub eval_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub synth_count: usize,
    pub synth_size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data: "synth".into(),
            out: PathBuf::from("runs/latest"),
            seed: 0,
            noise: NoiseSpec::Fixed { sigma: 25.0 },
            steps: 8,
            hidden: 128,
            channels: 1,
            patch_size: 32,
            patches_per_image: 32,
            augment: false,
            eval_fraction: 0.125,
            epochs: 50,
            batch: 40,
            max_steps: None,
            lr: 5e-4,
            synth_count: 64,
            synth_size: 48,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

pub fn parse_blind(value: &str) -> Result<NoiseSpec, String> {
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| format!("blind range `{value}` must look like lo:hi"))?;
    NoiseSpec::blind(parse("blind", lo.trim())?, parse("blind", hi.trim())?).map_err(|e| e.to_string())
}

impl Settings {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "data" => self.data = value.to_string(),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "sigma" => self.noise = NoiseSpec::fixed(parse(key, value)?).map_err(|e| e.to_string())?,
            "blind" => self.noise = parse_blind(value)?,
            "steps" => self.steps = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "patches_per_image" => self.patches_per_image = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "eval_fraction" => self.eval_fraction = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "synth_count" => self.synth_count = parse(key, value)?,
            "synth_size" => self.synth_size = parse(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(key.trim(), value).map_err(|e| format!("{}:{}: {e}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !matches!(self.channels, 1 | 3) {
            return Err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.hidden == 0 {
            return Err("hidden must be at least 1".into());
        }
        if self.batch < 2 {
            return Err("batch must be at least 2".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if self.patch_size == 0 || self.patches_per_image == 0 {
            return Err("patch_size and patches_per_image must be at least 1".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "data" => self.data.clone(),
            "out" => self.out.display().to_string(),
            "seed" => self.seed.to_string(),
            "sigma" => match self.noise {
                NoiseSpec::Fixed { sigma } => sigma.to_string(),
                NoiseSpec::Blind { .. } => "none".into(),
            },
            "blind" => match self.noise {
                NoiseSpec::Blind { lo, hi } => format!("{lo}:{hi}"),
                NoiseSpec::Fixed { .. } => "none".into(),
            },
            "steps" => self.steps.to_string(),
            "hidden" => self.hidden.to_string(),
            "channels" => self.channels.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "patches_per_image" => self.patches_per_image.to_string(),
            "augment" => self.augment.to_string(),
            "eval_fraction" => self.eval_fraction.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "max_steps" => self.max_steps.map_or("none".into(), |m| m.to_string()),
            "lr" => self.lr.to_string(),
            "synth_count" => self.synth_count.to_string(),
            "synth_size" => self.synth_size.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every effective value as a config file that reproduces this run.
    /// The noise key that does not apply is left out.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key);
            if value == "none" && matches!(*key, "sigma" | "blind") {
                continue;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_record_round_trips() {
        let mut s = Settings::default();
        s.set("blind", "0:55").unwrap();
        s.set("max_steps", "500").unwrap();
        s.set("hidden", "16").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, s.resolved()).unwrap();
        let mut back = Settings::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut s = Settings::default();
        assert!(s.set("colour", "red").is_err());
        assert!(s.set("hidden", "many").is_err());
        assert!(s.set("blind", "55").is_err());
        assert!(s.set("sigma", "-3").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\n\nsigma = 15 # low noise\nsteps=2\n").unwrap();
        let mut s = Settings::default();
        s.apply_file(&path).unwrap();
        assert_eq!(s.noise, NoiseSpec::Fixed { sigma: 15.0 });
        assert_eq!(s.steps, 2);
    }
}
