//! Out-of-process backend: batches travel as frames over a child's stdio.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::handler::{Backend, LocalBackend};
use super::wire::{BackendInit, BackendRequest, BackendResponse, FromBackend, ToBackend};
use super::ModelDescriptor;
use crate::error::ApiError;
use crate::frame::{read_frame, write_frame};

/// Backend running in a child process started as `<program> <args...>`.
pub struct ProcessBackend {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    models: Vec<ModelDescriptor>,
    dead: Option<String>,
}

impl std::fmt::Debug for ProcessBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessBackend").field("pid", &self.child.id()).finish()
    }
}

impl ProcessBackend {
    pub fn spawn(program: &Path, args: &[&str], init: &BackendInit) -> io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let mut stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        write_frame(&mut stdin, &ToBackend::Init(init.clone()))?;
        let models = match read_frame(&mut stdout)? {
            Some(FromBackend::Ready { models }) => models,
            Some(FromBackend::Failed { reason }) => return Err(io::Error::other(reason)),
            other => return Err(io::Error::other(format!("unexpected backend reply: {other:?}"))),
        };
        Ok(ProcessBackend { child, stdin, stdout, models, dead: None })
    }

    fn round_trip(&mut self, req: &BackendRequest) -> Result<BackendResponse, String> {
        write_frame(&mut self.stdin, &ToBackend::Batch(req.clone())).map_err(|e| e.to_string())?;
        match read_frame(&mut self.stdout).map_err(|e| e.to_string())? {
            Some(FromBackend::Done(resp)) if resp.results.len() == req.calls.len() => Ok(resp),
            Some(FromBackend::Failed { reason }) => Err(reason),
            Some(other) => Err(format!("unexpected backend reply: {other:?}")),
            None => Err("backend process exited".into()),
        }
    }
}

impl Backend for ProcessBackend {
    fn models(&self) -> Vec<ModelDescriptor> {
        self.models.clone()
    }

    fn execute(&mut self, req: &BackendRequest) -> BackendResponse {
        if self.dead.is_none() {
            match self.round_trip(req) {
                Ok(resp) => return resp,
                Err(reason) => self.dead = Some(reason),
            }
        }
        let reason = self.dead.clone().unwrap_or_default();
        BackendResponse { results: vec![Err(ApiError::Backend(reason)); req.calls.len()] }
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let _ = write_frame(&mut self.stdin, &ToBackend::Shutdown);
        let _ = self.child.wait();
    }
}

/// Child side: serves batches until `Shutdown` or end of input.
pub fn serve_backend<R: Read, W: Write>(input: R, output: W) -> io::Result<()> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    let mut backend: Option<LocalBackend> = None;
    while let Some(msg) = read_frame::<_, ToBackend>(&mut input)? {
        let reply = match msg {
            ToBackend::Init(init) => {
                let b = LocalBackend::new(&init);
                let models = b.models();
                backend = Some(b);
                FromBackend::Ready { models }
            }
            ToBackend::Batch(req) => match backend.as_mut() {
                Some(b) => FromBackend::Done(b.execute(&req)),
                None => FromBackend::Failed { reason: "batch before init".into() },
            },
            ToBackend::Shutdown => break,
        };
        write_frame(&mut output, &reply)?;
    }
    Ok(())
}
