//! Run configuration: JSON file values, overridden by command-line flags.

use std::path::{Path, PathBuf};

use nhloop::model::Direction;
use nhloop::precision::{PrecisionSpec, SeedMode};
use nhloop::LoopGeometry;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub g0: Option<f64>,
    pub r: Option<f64>,
    pub phi0: Option<f64>,
    #[serde(rename = "T")]
    pub period: Option<f64>,
    pub bits: Option<u32>,
    pub dt: Option<f64>,
    pub direction: Option<String>,
    pub seed_mode: Option<String>,
    pub out: Option<PathBuf>,
    pub axis: Option<String>,
    pub values: Option<Vec<f64>>,
    pub t_max: Option<f64>,
    pub samples: Option<usize>,
}

impl RunConfig {
    /// Fills every unset field of `self` from `base`.
    pub fn or(self, base: RunConfig) -> RunConfig {
        RunConfig {
            g0: self.g0.or(base.g0),
            r: self.r.or(base.r),
            phi0: self.phi0.or(base.phi0),
            period: self.period.or(base.period),
            bits: self.bits.or(base.bits),
            dt: self.dt.or(base.dt),
            direction: self.direction.or(base.direction),
            seed_mode: self.seed_mode.or(base.seed_mode),
            out: self.out.or(base.out),
            axis: self.axis.or(base.axis),
            values: self.values.or(base.values),
            t_max: self.t_max.or(base.t_max),
            samples: self.samples.or(base.samples),
        }
    }

    pub fn defaults() -> RunConfig {
        RunConfig {
            g0: Some(0.0),
            r: Some(0.5),
            phi0: Some(0.0),
            period: Some(100.0),
            bits: Some(53),
            dt: Some(0.01),
            direction: Some("cw".into()),
            seed_mode: Some("floor".into()),
            out: Some(PathBuf::from("out")),
            axis: None,
            values: None,
            t_max: Some(1e6),
            samples: Some(nhloop::propagator::DEFAULT_SAMPLE_COUNT),
        }
    }

    pub fn geometry(&self) -> Result<LoopGeometry, CliError> {
        let dir = parse_direction(self.direction.as_deref().unwrap_or("cw"))?;
        Ok(LoopGeometry::new(
            self.g0.unwrap_or(0.0),
            self.r.unwrap_or(0.5),
            self.phi0.unwrap_or(0.0),
            self.period.unwrap_or(100.0),
            dir,
        )?)
    }

    pub fn precision(&self) -> Result<PrecisionSpec, CliError> {
        let seed = SeedMode::parse(self.seed_mode.as_deref().unwrap_or("floor"))?;
        Ok(PrecisionSpec::new(self.bits.unwrap_or(53), self.dt.unwrap_or(0.01), seed)?)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

pub fn parse_direction(text: &str) -> Result<Direction, CliError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "cw" | "clockwise" | "+1" | "1" => Ok(Direction::Clockwise),
        "ccw" | "counterclockwise" | "-1" => Ok(Direction::CounterClockwise),
        other => Err(CliError::usage("INVALID_DIRECTION", format!("direction must be cw, ccw, +1 or -1, got `{other}`"))),
    }
}

/// Reads a config file; parse failures carry line and column.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage("CONFIG_READ", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| {
        let code = if e.to_string().starts_with("unknown field") { "UNKNOWN_KEY" } else { "CONFIG_PARSE" };
        CliError::usage(code, format!("line {} column {}: {e}", e.line(), e.column()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let full = c.or(RunConfig::defaults());
        assert_eq!(full, RunConfig::defaults());
        assert_eq!(full.precision().unwrap().bits(), 53);
    }

    #[test]
    fn unknown_keys_and_syntax_errors() {
        let e = parse_config(r#"{"bitz": 3}"#).unwrap_err();
        assert_eq!(e.code, "UNKNOWN_KEY");
        let e = parse_config("{\n \"bits\": }").unwrap_err();
        assert_eq!(e.code, "CONFIG_PARSE");
        assert!(e.message.contains("line 2"), "{}", e.message);
    }

    #[test]
    fn range_checked_after_merge() {
        let c = parse_config(r#"{"bits": 7}"#).unwrap().or(RunConfig::defaults());
        assert_eq!(c.precision().unwrap_err().code, "BITS_OUT_OF_RANGE");
        let flags = RunConfig { bits: Some(64), ..RunConfig::default() };
        assert_eq!(flags.or(c).precision().unwrap().bits(), 64);
    }

    #[test]
    fn directions() {
        assert_eq!(parse_direction("-1").unwrap(), Direction::CounterClockwise);
        assert!(parse_direction("up").is_err());
    }
}
