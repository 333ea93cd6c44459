//! Line-oriented adapter for backends running as external processes.
//!
//! Each request is one JSON line on the child's stdin; the child answers with
//! one line on stdout. Requests are serialized through a mutex so a single
//! child can be shared across threads.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::Engine;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Wire form of a patch: little-endian f32 samples, base64-encoded.
#[derive(Debug, Serialize)]
pub struct PatchRequest<'a> {
    pub source_id: &'a str,
    pub knee_side: &'a str,
    pub width: usize,
    pub height: usize,
    pub dtype: &'static str,
    pub data: String,
}

impl<'a> PatchRequest<'a> {
    pub fn new(source_id: &'a str, knee_side: &'a str, patch: &Grid<f32>) -> Self {
        let mut raw = Vec::with_capacity(patch.data().len() * 4);
        for v in patch.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            source_id,
            knee_side,
            width: patch.width(),
            height: patch.height(),
            dtype: "f32le",
            data: base64::engine::general_purpose::STANDARD.encode(raw),
        }
    }
}

struct Pipes {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalProcess {
    program: String,
    args: Vec<String>,
    pipes: Mutex<Pipes>,
}

impl ExternalProcess {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(Self {
            program: program.to_string(),
            args: args.to_vec(),
            pipes: Mutex::new(Pipes {
                child,
                stdin,
                stdout,
            }),
        })
    }

    /// Identifier used in report provenance.
    pub fn describe(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn request<T: Serialize>(&self, body: &T) -> Result<String> {
        let mut line = serde_json::to_string(body)?;
        line.push('\n');
        let mut pipes = self
            .pipes
            .lock()
            .map_err(|_| Error::Backend("backend mutex poisoned".into()))?;
        pipes
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipes.stdin.flush())
            .map_err(|e| Error::Backend(format!("write to `{}` failed: {e}", self.program)))?;
        let mut reply = String::new();
        let n = pipes
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("read from `{}` failed: {e}", self.program)))?;
        if n == 0 {
            return Err(Error::Backend(format!("`{}` closed its output", self.program)));
        }
        Ok(reply.trim_end().to_string())
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        if let Ok(p) = self.pipes.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}
