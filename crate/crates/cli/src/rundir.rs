//! Run-directory bookkeeping.
//!
//! Every subcommand leaves two files beside its outputs: `config.txt`, the
//! full resolved knob set in re-parseable form, and `run.json` with the seed,
//! tool version, thread count, and a content hash of each input file. That
//! tuple is sufficient to replay the run bit-exactly, which is why nothing
//! here records a timestamp.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::settings::Settings;

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    /// Input path, as passed on the command line, to SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Final bookkeeping for one run: rejects unread config keys in the
/// command's `sections`, then writes `config.txt` and `run.json` under
/// `out`. `inputs` are the files the run read; the config file itself, when
/// given, should be among them.
pub fn finalize(
    out: &Path,
    settings: &Settings,
    sections: &[&str],
    seed: u64,
    threads: usize,
    inputs: &[&Path],
) -> Result<()> {
    settings.reject_unknown(sections)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), settings.echo())?;

    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let record = RunRecord {
        tool: "gaitkit",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        inputs: hashes,
    };
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    fs::write(out.join("run.json"), text)?;
    Ok(())
}
