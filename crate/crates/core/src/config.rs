//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every field of
//! [`TrackerConfig`] has a key; unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::error::{DntError, Result};
use crate::tracking::TrackerConfig;

/// Tap names accepted by `feature_layers`, in order.
pub const FEATURE_LAYERS: [&str; 2] = ["conv4_3", "conv5_3"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DntError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items: Vec<T> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| DntError::Config(format!("{key}: expected {N} comma-separated values, got {n}")))
}

fn check_layers(value: &str) -> Result<()> {
    let names: Vec<String> = value.split(',').map(|s| s.trim().replace('-', "_").to_lowercase()).collect();
    if names.len() >= 3 {
        return Err(DntError::Config(format!(
            "feature_layers: {} layers requested; stacking three or more layers into a hypercolumn is not supported, use exactly {}",
            names.len(),
            FEATURE_LAYERS.join(",")
        )));
    }
    if names != FEATURE_LAYERS {
        return Err(DntError::Config(format!(
            "feature_layers: {value:?} unsupported, use exactly {}",
            FEATURE_LAYERS.join(",")
        )));
    }
    Ok(())
}

impl TrackerConfig {
    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "fusion_weight" => self.fusion_weight = parse(key, value)?,
            "anomaly_threshold" => self.anomaly_threshold = parse(key, value)?,
            "anomaly_rule" => self.anomaly_rule = value.parse()?,
            "candidates" => self.candidates = parse(key, value)?,
            "update_period" => self.update_period = parse(key, value)?,
            "buffer_size" => self.buffer_size = parse(key, value)?,
            "motion_var_x" => self.motion.var_x = parse(key, value)?,
            "motion_var_y" => self.motion.var_y = parse(key, value)?,
            "motion_var_scale" => self.motion.var_scale = parse(key, value)?,
            "rng_seed" => {
                self.rng_seed = parse(key, value)?;
                self.train.rng_seed = self.rng_seed;
            }
            "search_scale" => self.search_scale = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "log_sigma" => self.log_sigma = parse(key, value)?,
            "log_kernel_size" => self.log_kernel_size = parse(key, value)?,
            "label_sigma_factor" => self.label_sigma_factor = parse(key, value)?,
            "threshold_fraction" => self.threshold_fraction = parse(key, value)?,
            "max_shift_fraction" => self.max_shift_fraction = parse(key, value)?,
            "fuse_normalize" => self.fuse_normalize = parse(key, value)?,
            "score_offset" => {
                self.score_offset = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "update_iterations" => self.update_iterations = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "offset_mix" => self.offset_mix = parse(key, value)?,
            "prior_bias" => self.prior_bias = parse(key, value)?,
            "dual_widths" => self.dual_widths = parse_list(key, value)?,
            "feature_layers" => check_layers(value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "init_iterations" => self.train.iterations = parse(key, value)?,
            "random_patches" => self.train.random_patches = parse(key, value)?,
            "icar_rho" => self.icar.rho = parse(key, value)?,
            "icar_xi" => self.icar.xi = parse(key, value)?,
            "icar_gamma" => self.icar.gamma = parse(key, value)?,
            "icar_eta" => self.icar.eta = parse(key, value)?,
            "icar_max_iters" => self.icar.max_iters = parse(key, value)?,
            "icar_tol" => self.icar.tol = parse(key, value)?,
            "icar_gauss_moment" => self.icar.gauss_moment = parse(key, value)?,
            "icar_whiten_eps" => self.icar.whiten_eps = parse(key, value)?,
            "pixel_scale" => self.pixel_scale = parse(key, value)?,
            "pixel_mean" => self.pixel_mean = parse_list(key, value)?,
            _ => return Err(DntError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DntError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| DntError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrackerConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let lines = [
            ("fusion_weight", self.fusion_weight.to_string()),
            ("anomaly_threshold", self.anomaly_threshold.to_string()),
            ("anomaly_rule", self.anomaly_rule.to_string()),
            ("candidates", self.candidates.to_string()),
            ("update_period", self.update_period.to_string()),
            ("buffer_size", self.buffer_size.to_string()),
            ("motion_var_x", self.motion.var_x.to_string()),
            ("motion_var_y", self.motion.var_y.to_string()),
            ("motion_var_scale", self.motion.var_scale.to_string()),
            ("rng_seed", self.rng_seed.to_string()),
            ("search_scale", self.search_scale.to_string()),
            ("input_size", self.input_size.to_string()),
            ("log_sigma", self.log_sigma.to_string()),
            ("log_kernel_size", self.log_kernel_size.to_string()),
            ("label_sigma_factor", self.label_sigma_factor.to_string()),
            ("threshold_fraction", self.threshold_fraction.to_string()),
            ("max_shift_fraction", self.max_shift_fraction.to_string()),
            ("fuse_normalize", self.fuse_normalize.to_string()),
            ("score_offset", self.score_offset.map_or("auto".to_string(), |v| v.to_string())),
            ("update_iterations", self.update_iterations.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("offset_mix", self.offset_mix.to_string()),
            ("prior_bias", self.prior_bias.to_string()),
            ("dual_widths", join(&self.dual_widths.map(|w| w.to_string()))),
            ("feature_layers", FEATURE_LAYERS.join(",")),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("momentum", self.train.momentum.to_string()),
            ("weight_decay", self.train.weight_decay.to_string()),
            ("init_iterations", self.train.iterations.to_string()),
            ("random_patches", self.train.random_patches.to_string()),
            ("icar_rho", self.icar.rho.to_string()),
            ("icar_xi", self.icar.xi.to_string()),
            ("icar_gamma", self.icar.gamma.to_string()),
            ("icar_eta", self.icar.eta.to_string()),
            ("icar_max_iters", self.icar.max_iters.to_string()),
            ("icar_tol", self.icar.tol.to_string()),
            ("icar_gauss_moment", self.icar.gauss_moment.to_string()),
            ("icar_whiten_eps", self.icar.whiten_eps.to_string()),
            ("pixel_scale", self.pixel_scale.to_string()),
            ("pixel_mean", join(&self.pixel_mean.map(|w| w.to_string()))),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::AnomalyRule;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrackerConfig::default();
        assert_eq!(TrackerConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# synthetic run\n\ninput_size = 128\nlearning_rate=1e-2  # faster\nanomaly_rule = literal\ndual_widths = 8, 4, 4\n";
        let cfg = TrackerConfig::from_text(text).unwrap();
        assert_eq!(cfg.input_size, 128);
        assert_eq!(cfg.train.learning_rate, 1e-2);
        assert_eq!(cfg.anomaly_rule, AnomalyRule::Literal);
        assert_eq!(cfg.dual_widths, [8, 4, 4]);
        assert_eq!(cfg.candidates, 600);
    }

    #[test]
    fn bad_lines_are_reported() {
        for bad in ["nonsense", "candidates = many", "who = 1", "fusion_weight = 2", "dual_widths = 1,2"] {
            assert!(matches!(TrackerConfig::from_text(bad), Err(DntError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn feature_layers() {
        assert!(TrackerConfig::from_text("feature_layers = conv4-3, conv5-3").is_ok());
        let err = TrackerConfig::from_text("feature_layers = conv3_3,conv4_3,conv5_3").unwrap_err();
        assert!(err.to_string().contains("hypercolumn"));
        assert!(TrackerConfig::from_text("feature_layers = conv5_3").is_err());
    }
}
