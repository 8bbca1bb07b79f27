//! Plain-text run manifests.
//!
//! A manifest is itself a valid config: the run metadata sits in `#` comments and the
//! body echoes every key, so `otrecon <command> --config manifest.txt` replays a run.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::error::CliResult;

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn version() -> String {
    format!("otrecon {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    /// Output file names relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            artifacts: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "# otrecon run manifest").unwrap();
        writeln!(w, "# command: {}", self.command).unwrap();
        writeln!(w, "# version: {}", version()).unwrap();
        writeln!(w, "# seed: {}", self.config.int("seed")).unwrap();
        for a in &self.artifacts {
            writeln!(w, "# artifact: {a}").unwrap();
        }
        writeln!(w, "# replay: otrecon {} --config {MANIFEST_NAME} --out <dir>", self.command).unwrap();
        out.push_str(&self.config.echo());
        out
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(dir.join(MANIFEST_NAME), self.render())?;
        Ok(())
    }
}
