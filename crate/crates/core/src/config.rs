//! Plain-text run configuration: UTF-8 lines of `key = value`, `#`
//! comments, every model and training field addressable by name, unknown
//! keys rejected.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MsaaPlacement};
use crate::msaa::MsaaPool;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            steps: 500,
            lr: 1e-3,
            batch_size: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Full listing with every key, parseable by [`parse`].
    pub fn render(&self) -> String {
        let m = &self.model;
        let windows = m
            .windows
            .iter()
            .map(|(a, b)| format!("{a}x{b}"))
            .collect::<Vec<_>>()
            .join(",");
        let channels = m
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "classes = {}\n\
             channels = {}\n\
             d_state = {}\n\
             windows = {}\n\
             use_lms = {}\n\
             use_aux = {}\n\
             use_msaa = {}\n\
             msaa_pool = {}\n\
             msaa_placement = {}\n\
             seed = {}\n\
             epsilon = {:?}\n\
             dice_smooth = {:?}\n\
             main_mix = {:?},{:?}\n\
             steps = {}\n\
             lr = {:?}\n\
             batch_size = {}\n",
            m.classes,
            channels,
            m.d_state,
            windows,
            m.use_lms,
            m.use_aux,
            m.use_msaa,
            match m.msaa_pool {
                MsaaPool::SpatialLocal => "spatial",
                MsaaPool::ChannelReduce => "channel",
            },
            match m.msaa_placement {
                MsaaPlacement::Shallow => "shallow",
                MsaaPlacement::Deep => "deep",
            },
            m.seed,
            m.loss.epsilon,
            m.loss.dice_smooth,
            m.loss.main_mix.0,
            m.loss.main_mix.1,
            self.steps,
            self.lr,
            self.batch_size,
        )
    }
}

fn parse_scalar<V: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| {
        Error::Config(format!("line {line}: bad value {value:?} for {key}"))
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: bad boolean {value:?} for {key}"
        ))),
    }
}

fn parse_list<V: std::str::FromStr, const N: usize>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<[V; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!(
            "line {line}: {key} needs {N} comma-separated entries, got {}",
            parts.len()
        )));
    }
    let mut out = Vec::with_capacity(N);
    for p in parts {
        out.push(parse_scalar(line, key, p)?);
    }
    Ok(out.try_into().map_err(|_| ()).unwrap())
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {lineno}: expected `key = value`, got {raw:?}"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!(
                "line {lineno}: duplicate key {key:?}"
            )));
        }
        let m = &mut cfg.model;
        match key {
            "classes" => m.classes = parse_scalar(lineno, key, value)?,
            "channels" => m.channels = parse_list(lineno, key, value)?,
            "d_state" => m.d_state = parse_scalar(lineno, key, value)?,
            "windows" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "line {lineno}: windows needs 4 entries, got {}",
                        parts.len()
                    )));
                }
                for (slot, p) in m.windows.iter_mut().zip(parts) {
                    let (a, b) = p.split_once('x').ok_or_else(|| {
                        Error::Config(format!(
                            "line {lineno}: window {p:?} is not MxN"
                        ))
                    })?;
                    *slot = (
                        parse_scalar(lineno, key, a)?,
                        parse_scalar(lineno, key, b)?,
                    );
                }
            }
            "use_lms" => m.use_lms = parse_bool(lineno, key, value)?,
            "use_aux" => m.use_aux = parse_bool(lineno, key, value)?,
            "use_msaa" => m.use_msaa = parse_bool(lineno, key, value)?,
            "msaa_pool" => {
                m.msaa_pool = match value {
                    "spatial" => MsaaPool::SpatialLocal,
                    "channel" => MsaaPool::ChannelReduce,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {lineno}: msaa_pool must be spatial or channel, got {value:?}"
                        )))
                    }
                }
            }
            "msaa_placement" => {
                m.msaa_placement = match value {
                    "shallow" => MsaaPlacement::Shallow,
                    "deep" => MsaaPlacement::Deep,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {lineno}: msaa_placement must be shallow or deep, got {value:?}"
                        )))
                    }
                }
            }
            "seed" => m.seed = parse_scalar(lineno, key, value)?,
            "epsilon" => m.loss.epsilon = parse_scalar(lineno, key, value)?,
            "dice_smooth" => m.loss.dice_smooth = parse_scalar(lineno, key, value)?,
            "main_mix" => {
                let [a, b]: [f64; 2] = parse_list(lineno, key, value)?;
                m.loss.main_mix = (a, b);
            }
            "steps" => cfg.steps = parse_scalar(lineno, key, value)?,
            "lr" => cfg.lr = parse_scalar(lineno, key, value)?,
            "batch_size" => cfg.batch_size = parse_scalar(lineno, key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown config key {key:?}"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
