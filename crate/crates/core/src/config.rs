//! Flat `key = value` configuration files. Keys mirror the `TrainConfig`
//! field names; nested settings use dotted keys such as `sst.alpha` or
//! `dims.d_h`. `#` starts a comment. Missing keys keep their defaults.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{raw}` for `{key}`")))
}

fn set(cfg: &mut TrainConfig, key: &str, raw: &str, line: usize) -> Result<()> {
    macro_rules! assign {
        ($($name:literal => $field:expr),* $(,)?) => {
            match key {
                $($name => $field = parse_value(key, raw, line)?,)*
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        };
    }
    assign! {
        "lambda1" => cfg.lambda1,
        "lambda2" => cfg.lambda2,
        "lambda3" => cfg.lambda3,
        "use_inter" => cfg.use_inter,
        "use_intra" => cfg.use_intra,
        "use_sup_cap" => cfg.use_sup_cap,
        "freeze_text" => cfg.freeze_text,
        "lr" => cfg.lr,
        "epochs" => cfg.epochs,
        "batch_size" => cfg.batch_size,
        "beam_size" => cfg.beam_size,
        "tel_prob" => cfg.tel_prob,
        "seed" => cfg.seed,
        "max_len" => cfg.max_len,
        "length_norm" => cfg.length_norm,
        "grad_clip" => cfg.grad_clip,
        "min_count" => cfg.min_count,
        "determinism" => cfg.determinism,
        "select_best" => cfg.select_best,
        "sst.alpha" => cfg.sst.alpha,
        "sst.m" => cfg.sst.m,
        "sst.y_signal" => cfg.sst.y_signal,
        "support.theta_scale" => cfg.support.theta_scale,
        "support.include_self" => cfg.support.include_self,
        "support.enabled" => cfg.support.enabled,
        "dims.d_v" => cfg.dims.d_v,
        "dims.d_h" => cfg.dims.d_h,
        "dims.d_s" => cfg.dims.d_s,
        "dims.d_e" => cfg.dims.d_e,
        "dims.d_dec" => cfg.dims.d_dec,
        "dims.d_att" => cfg.dims.d_att,
        "dims.d_text" => cfg.dims.d_text,
        "dims.clips" => cfg.dims.clips,
    }
    Ok(())
}

/// Parses and validates a configuration text.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
        }
        set(&mut cfg, key, value, line)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Canonical text form; `parse_config(&to_config_text(c)) == c`.
pub fn to_config_text(cfg: &TrainConfig) -> String {
    let d = &cfg.dims;
    let entries: Vec<(&str, String)> = vec![
        ("lambda1", cfg.lambda1.to_string()),
        ("lambda2", cfg.lambda2.to_string()),
        ("lambda3", cfg.lambda3.to_string()),
        ("use_inter", cfg.use_inter.to_string()),
        ("use_intra", cfg.use_intra.to_string()),
        ("use_sup_cap", cfg.use_sup_cap.to_string()),
        ("freeze_text", cfg.freeze_text.to_string()),
        ("lr", cfg.lr.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("beam_size", cfg.beam_size.to_string()),
        ("tel_prob", cfg.tel_prob.to_string()),
        ("seed", cfg.seed.to_string()),
        ("max_len", cfg.max_len.to_string()),
        ("length_norm", cfg.length_norm.to_string()),
        ("grad_clip", cfg.grad_clip.to_string()),
        ("min_count", cfg.min_count.to_string()),
        ("determinism", cfg.determinism.to_string()),
        ("select_best", cfg.select_best.to_string()),
        ("sst.alpha", cfg.sst.alpha.to_string()),
        ("sst.m", cfg.sst.m.to_string()),
        ("sst.y_signal", cfg.sst.y_signal.to_string()),
        ("support.theta_scale", cfg.support.theta_scale.to_string()),
        ("support.include_self", cfg.support.include_self.to_string()),
        ("support.enabled", cfg.support.enabled.to_string()),
        ("dims.d_v", d.d_v.to_string()),
        ("dims.d_h", d.d_h.to_string()),
        ("dims.d_s", d.d_s.to_string()),
        ("dims.d_e", d.d_e.to_string()),
        ("dims.d_dec", d.d_dec.to_string()),
        ("dims.d_att", d.d_att.to_string()),
        ("dims.d_text", d.d_text.to_string()),
        ("dims.clips", d.clips.to_string()),
    ];
    entries
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
