//! Locating config files: an existing path, then `$STRATUM_PRESET_DIR`,
//! then the presets compiled into the binary.

use std::path::{Path, PathBuf};

use stratum_core::{Scenario, SimError};

pub const PRESET_DIR_VAR: &str = "STRATUM_PRESET_DIR";

const EMBEDDED: [(&str, &str); 6] = [
    ("stratum-s", include_str!("../../../presets/stratum-s.json")),
    ("stratum-l", include_str!("../../../presets/stratum-l.json")),
    (
        "stratum-xl",
        include_str!("../../../presets/stratum-xl.json"),
    ),
    (
        "mixtral-stratum-l",
        include_str!("../../../presets/mixtral-stratum-l.json"),
    ),
    (
        "olmoe-stratum-s",
        include_str!("../../../presets/olmoe-stratum-s.json"),
    ),
    (
        "llama4-stratum-xl",
        include_str!("../../../presets/llama4-stratum-xl.json"),
    ),
];

pub fn embedded_names() -> impl Iterator<Item = &'static str> {
    EMBEDDED.iter().map(|(n, _)| *n)
}

/// `presets/foo.json`, `foo.json` and `foo` all name preset `foo`.
fn preset_name(arg: &str) -> Option<&str> {
    let file = Path::new(arg).file_name()?.to_str()?;
    Some(file.strip_suffix(".json").unwrap_or(file))
}

fn config_text(arg: &str) -> Result<String, SimError> {
    let path = Path::new(arg);
    if path.is_file() {
        return Ok(std::fs::read_to_string(path)?);
    }
    let name = preset_name(arg).unwrap_or(arg);
    if let Some(dir) = std::env::var_os(PRESET_DIR_VAR) {
        let candidate = PathBuf::from(dir).join(format!("{name}.json"));
        if candidate.is_file() {
            log::debug!("using {}", candidate.display());
            return Ok(std::fs::read_to_string(candidate)?);
        }
    }
    if let Some((_, text)) = EMBEDDED.iter().find(|(n, _)| *n == name) {
        log::debug!("using built-in preset {name}");
        return Ok(text.to_string());
    }
    Err(SimError::Invalid {
        field: "config".into(),
        reason: format!(
            "`{arg}` is not a file, not in ${PRESET_DIR_VAR}, and not one of: {}",
            embedded_names().collect::<Vec<_>>().join(", ")
        ),
    })
}

pub fn load_scenario(arg: &str, overrides: &[String]) -> Result<Scenario, SimError> {
    Scenario::from_json_str(&config_text(arg)?, overrides)
}
