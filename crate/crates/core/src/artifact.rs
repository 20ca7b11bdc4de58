//! Provenance headers stamped into every output artifact.
//!
//! The header is a single `#` comment line carrying tool version,
//! subcommand, and seed, so any artifact can be traced back to the exact
//! invocation that produced it. No timestamps: identical invocations must
//! produce byte-identical files.

pub const TOOL_NAME: &str = "calib";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub subcommand: String,
    pub seed: u64,
}

impl ArtifactHeader {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        ArtifactHeader { subcommand: subcommand.to_string(), seed }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# {TOOL_NAME} v{TOOL_VERSION} subcommand={} seed={}",
            self.subcommand, self.seed
        )
    }

    /// Recover the seed recorded in a header line, if the line is one of
    /// ours.
    pub fn parse_seed(line: &str) -> Option<u64> {
        line.strip_prefix('#')?
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix("seed="))?
            .parse()
            .ok()
    }
}
