//! The toolkit's TOML configuration.
//!
//! Every section is optional and falls back to desk-scale defaults:
//!
//! ```toml
//! [anchor]      # basic_sizes, stride
//! [assignment]  # positive_iou_threshold, negative_iou_threshold, force_best_match
//! [loss]        # eta, lambda, pair thresholds, smooth_l1_beta, iou_source
//! [pipeline]    # patch_shape, per_patch_top_k, nms_iou_threshold, min_volume, max_volume
//! [synthetic]   # volume_shape, voxel_spacing, lesion ranges, intensities, seed
//! [train]       # steps, learning_rate, embed_dim, seed
//! [eval]        # fusion_weight, classification_threshold, [eval.matching]
//! [gradcheck]   # n_batches, seed, step, rel_tol, abs_tol, embed_dim
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxdet_core::gradcheck::GradcheckConfig;
use voxdet_core::synthetic::{desk_anchor_spec, desk_pipeline_config, EvalConfig, SyntheticSpec, TrainConfig};
use voxdet_core::{AnchorSpec, AssignmentConfig, LossParams, PipelineConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolkitConfig {
    pub anchor: AnchorSpec,
    pub assignment: AssignmentConfig,
    pub loss: LossParams,
    pub pipeline: PipelineConfig,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            anchor: desk_anchor_spec(),
            assignment: AssignmentConfig::default(),
            loss: LossParams::default(),
            pipeline: desk_pipeline_config(),
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ToolkitConfig {
    /// Loads `path` (or defaults when `None`), applies `key=value` overrides,
    /// then validates every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
                p.display().to_string(),
            ),
            None => (String::new(), "<defaults>".to_string()),
        };
        Self::from_text(&text, &origin, overrides)
    }

    pub fn from_text(text: &str, origin: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            CliError::Invalid(locate(origin, line, e.message()))
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ToolkitConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            // Spans refer to the re-serialized table, so search the source text instead.
            let line = e.message().split('`').nth(1).and_then(|key| find_key_line(text, None, key));
            CliError::Invalid(locate(origin, line, e.message()))
        })?;
        cfg.validate(text, origin)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str, origin: &str) -> Result<(), CliError> {
        let checks: [(&str, voxdet_core::Result<()>); 8] = [
            ("anchor", self.anchor.validate()),
            ("assignment", self.assignment.validate()),
            ("loss", self.loss.validate()),
            ("pipeline", self.pipeline.validate()),
            ("synthetic", self.synthetic.validate()),
            ("train", self.train.validate()),
            ("eval", validate_eval(&self.eval)),
            ("gradcheck", self.gradcheck.validate()),
        ];
        for (section, result) in checks {
            if let Err(e) = result {
                let msg = e.to_string();
                let line = words(&msg)
                    .find_map(|key| find_key_line(text, Some(section), key))
                    .or_else(|| section_line(text, section));
                return Err(CliError::Invalid(locate(origin, line, &format!("[{section}] {msg}"))));
            }
        }
        Ok(())
    }

    /// Replaces every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
    }
}

fn validate_eval(e: &EvalConfig) -> voxdet_core::Result<()> {
    if !(0.0..=1.0).contains(&e.fusion_weight) {
        return Err(voxdet_core::Error::Config("fusion_weight must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&e.classification_threshold) {
        return Err(voxdet_core::Error::Config("classification_threshold must lie in [0, 1]".into()));
    }
    if !(0.0..1.0).contains(&e.matching.hit_iou_threshold) {
        return Err(voxdet_core::Error::Config("hit_iou_threshold must lie in [0, 1)".into()));
    }
    Ok(())
}

fn locate(origin: &str, line: Option<usize>, msg: &str) -> String {
    match line {
        Some(l) => format!("{origin}:{l}: {msg}"),
        None => format!("{origin}: {msg}"),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Identifier-like words of a validation message; the first one naming a key in the file locates the error.
fn words(msg: &str) -> impl Iterator<Item = &str> {
    msg.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| w.starts_with(|c: char| c.is_ascii_lowercase()))
}

fn section_line(text: &str, section: &str) -> Option<usize> {
    let header = format!("[{section}]");
    text.lines().position(|l| l.trim() == header).map(|i| i + 1)
}

/// 1-based line assigning `key`, inside `[section]` when given.
fn find_key_line(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(h.trim_matches(|c| c == '[' || c == ']').to_string());
            continue;
        }
        let Some((lhs, _)) = t.split_once('=') else { continue };
        let lhs = lhs.trim();
        let in_section = match (section, current.as_deref()) {
            (None, _) => true,
            (Some(s), Some(c)) => c == s || c.starts_with(&format!("{s}.")),
            (Some(s), None) => lhs.starts_with(&format!("{s}.")),
        };
        if in_section && (lhs == key || lhs.ends_with(&format!(".{key}"))) {
            return Some(i + 1);
        }
    }
    None
}

/// `section.key=value`, where `value` is any TOML value; bare words are strings.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let bad = |why: &str| CliError::Invalid(format!("--set {spec}: {why}"));
    let (path, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| bad(&format!("`{k}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ToolkitConfig::from_text("", "x", &[]).unwrap(), ToolkitConfig::default());
    }

    #[test]
    fn validation_error_points_at_the_key_line() {
        let text = "[loss]\neta = 1.0\n\n[assignment]\npositive_iou_threshold = 0.05\n";
        let err = ToolkitConfig::from_text(text, "cfg.toml", &[]).unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:5:"), "{err}");
        let text = "[loss]\nlambda = 0.7\neta = -1.0\n";
        let err = ToolkitConfig::from_text(text, "cfg.toml", &[]).unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:3:"), "{err}");
    }

    #[test]
    fn syntax_error_has_a_line() {
        let err = ToolkitConfig::from_text("[loss]\neta = = 2\n", "c", &[]).unwrap_err().to_string();
        assert!(err.starts_with("c:2:"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let err = ToolkitConfig::from_text("[train]\nsteps = 3\nlearnin_rate = 0.1\n", "c", &[])
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("c:3:"), "{err}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ToolkitConfig::from_text("", "c", &["loss.lambda=0".into(), "train.steps=7".into()]).unwrap();
        assert_eq!(cfg.loss.lambda, 0.0);
        assert_eq!(cfg.train.steps, 7);
        let cfg = ToolkitConfig::from_text("", "c", &["loss.iou_source=anchor".into()]).unwrap();
        assert_eq!(cfg.loss.iou_source, voxdet_core::losses::IouSource::Anchor);
        assert!(ToolkitConfig::from_text("", "c", &["loss.eta=-1".into()]).is_err());
        assert!(ToolkitConfig::from_text("", "c", &["nonsense".into()]).is_err());
    }

    #[test]
    fn serialized_defaults_load_back() {
        let text = toml::to_string(&ToolkitConfig::default()).unwrap();
        assert_eq!(ToolkitConfig::from_text(&text, "c", &[]).unwrap(), ToolkitConfig::default());
    }
}
