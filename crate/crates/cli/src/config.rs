//! JSON run configuration. Every field is optional; command-line flags win.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

impl ClassRef {
    pub fn into_string(self) -> String {
        match self {
            ClassRef::Index(i) => i.to_string(),
            ClassRef::Name(s) => s,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub counterfactuals: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub save_matching: Option<PathBuf>,
    pub save_attributions: Option<PathBuf>,
    pub reports: Option<Vec<PathBuf>>,

    pub target: Option<ClassRef>,
    pub scale: Option<String>,

    pub generator: Option<String>,
    pub k: Option<usize>,
    pub max_iters: Option<usize>,
    pub step_size: Option<f64>,
    pub lambda_init: Option<f64>,
    pub lambda_growth: Option<f64>,
    pub margin: Option<f64>,
    pub distance: Option<String>,

    pub pairing: Option<String>,
    pub matcher: Option<String>,
    pub attributor: Option<String>,
    pub samples: Option<usize>,
    pub exact_limit: Option<usize>,
    pub mode: Option<String>,
    pub budget: Option<usize>,
    pub allocation: Option<String>,
    pub timing: Option<bool>,
}

impl RunConfig {
    /// Parse a config file. Relative paths inside it are resolved against
    /// the file's own directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.schema);
        fix(&mut self.data);
        fix(&mut self.model);
        fix(&mut self.counterfactuals);
        fix(&mut self.out);
        fix(&mut self.report);
        fix(&mut self.heatmap);
        fix(&mut self.save_matching);
        fix(&mut self.save_attributions);
        if let Some(reports) = &mut self.reports {
            for path in reports.iter_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        }
    }
}
