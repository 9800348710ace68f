//! Obtaining a disassembly listing: an external disassembler named by
//! [`DISASSEMBLER_ENV`], or a pre-generated `.dis` evidence file.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{AnalysisError, DisassemblyListing};

pub const DISASSEMBLER_ENV: &str = "INCISOR_DISASSEMBLER";
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListingSource {
    External(PathBuf),
    Evidence(PathBuf),
}

#[derive(Debug, Clone)]
pub struct DisassemblerAdapter {
    pub program: Option<PathBuf>,
    pub timeout: Duration,
}

impl Default for DisassemblerAdapter {
    fn default() -> Self {
        DisassemblerAdapter {
            program: None,
            timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }
}

impl DisassemblerAdapter {
    pub fn from_env() -> Self {
        DisassemblerAdapter {
            program: std::env::var_os(DISASSEMBLER_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
            timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Runs the configured disassembler on `entry`, falling back to the
    /// first existing evidence listing.
    pub fn listing(&self, entry: &Path, evidence: &[PathBuf]) -> Result<(DisassemblyListing, ListingSource), AnalysisError> {
        if let Some(program) = &self.program {
            let text = run_with_timeout(program, &["-d".as_ref(), entry.as_os_str()], self.timeout)?;
            return Ok((DisassemblyListing::parse(&text), ListingSource::External(program.clone())));
        }
        let dis = evidence
            .iter()
            .find(|p| p.extension().is_some_and(|e| e == "dis") && p.is_file())
            .ok_or(AnalysisError::NoListing)?;
        let text = std::fs::read_to_string(dis).map_err(|e| AnalysisError::io(dis, e))?;
        Ok((DisassemblyListing::parse(&text), ListingSource::Evidence(dis.clone())))
    }
}

/// Spawns `program args`, collecting stdout. The child is killed once
/// `timeout` elapses.
pub fn run_with_timeout(program: &Path, args: &[&std::ffi::OsStr], timeout: Duration) -> Result<String, AnalysisError> {
    let tool = program.display().to_string();
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| AnalysisError::ToolFailed {
            tool: tool.clone(),
            message: e.to_string(),
        })?;

    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(AnalysisError::ToolTimeout {
                    tool,
                    seconds: timeout.as_secs_f64(),
                });
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                return Err(AnalysisError::ToolFailed {
                    tool,
                    message: e.to_string(),
                })
            }
        }
    };
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(AnalysisError::ToolFailed {
            tool,
            message: format!("{status}: {}", String::from_utf8_lossy(&err).trim()),
        });
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}
