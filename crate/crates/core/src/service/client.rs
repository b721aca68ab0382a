use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use super::protocol::{ClientFrame, ServerFrame};
use crate::backends::ModelDescriptor;
use crate::frame::{read_frame, write_frame};
use crate::resources::InstanceId;
use crate::runtime::{InstanceInfo, InstanceStatus, LaunchInfo};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server closed the connection")]
    Closed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Server { code: i32, message: String },
}

/// Blocking client. Pushes that arrive while waiting for a response are
/// buffered and handed out by [`Client::next_push`] in arrival order.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
    pushes: VecDeque<ServerFrame>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        let _ = stream.set_nodelay(true);
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Client { reader, writer: BufWriter::new(stream), next_id: 1, pushes: VecDeque::new() })
    }

    fn read(&mut self) -> Result<ServerFrame, ClientError> {
        read_frame(&mut self.reader)?.ok_or(ClientError::Closed)
    }

    fn call(&mut self, make: impl FnOnce(u64) -> ClientFrame) -> Result<ServerFrame, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        write_frame(&mut self.writer, &make(id))?;
        loop {
            let frame = self.read()?;
            match frame.id() {
                Some(got) if got == id => {
                    return match frame {
                        ServerFrame::Error { code, message, .. } => Err(ClientError::Server { code, message }),
                        other => Ok(other),
                    };
                }
                Some(other) => return Err(ClientError::Protocol(format!("response {other} while waiting for {id}"))),
                None => {
                    if let ServerFrame::Error { code, message, .. } = frame {
                        return Err(ClientError::Server { code, message });
                    }
                    self.pushes.push_back(frame);
                }
            }
        }
    }

    fn unexpected(frame: ServerFrame) -> ClientError {
        ClientError::Protocol(format!("unexpected response {frame:?}"))
    }

    /// Returns the program hash and whether it was already stored.
    pub fn upload(&mut self, data: &[u8]) -> Result<(String, bool), ClientError> {
        match self.call(|id| ClientFrame::UploadProgram { id, data: data.to_vec() })? {
            ServerFrame::Uploaded { program, existed, .. } => Ok((program, existed)),
            f => Err(Self::unexpected(f)),
        }
    }

    pub fn launch(&mut self, program: &str, args: &[String]) -> Result<LaunchInfo, ClientError> {
        match self.call(|id| ClientFrame::Launch { id, program: program.into(), args: args.to_vec() })? {
            ServerFrame::Launched { instance, program, cache_hit, latency_us, .. } => {
                Ok(LaunchInfo { instance, program, cache_hit, latency_us })
            }
            f => Err(Self::unexpected(f)),
        }
    }

    pub fn send(&mut self, instance: InstanceId, data: &[u8]) -> Result<(), ClientError> {
        match self.call(|id| ClientFrame::Send { id, instance, data: data.to_vec() })? {
            ServerFrame::Ack { .. } => Ok(()),
            f => Err(Self::unexpected(f)),
        }
    }

    pub fn stream(&mut self, instance: InstanceId) -> Result<(), ClientError> {
        match self.call(|id| ClientFrame::Stream { id, instance })? {
            ServerFrame::Ack { .. } => Ok(()),
            f => Err(Self::unexpected(f)),
        }
    }

    /// Returns whether the instance was still running, and its final status.
    pub fn terminate(&mut self, instance: InstanceId) -> Result<(bool, InstanceStatus), ClientError> {
        match self.call(|id| ClientFrame::Terminate { id, instance })? {
            ServerFrame::Terminated { was_running, status, .. } => Ok((was_running, status)),
            f => Err(Self::unexpected(f)),
        }
    }

    pub fn models(&mut self) -> Result<Vec<ModelDescriptor>, ClientError> {
        match self.call(|id| ClientFrame::QueryModels { id })? {
            ServerFrame::Models { models, .. } => Ok(models),
            f => Err(Self::unexpected(f)),
        }
    }

    pub fn instances(&mut self) -> Result<Vec<InstanceInfo>, ClientError> {
        match self.call(|id| ClientFrame::QueryInstances { id })? {
            ServerFrame::Instances { instances, .. } => Ok(instances),
            f => Err(Self::unexpected(f)),
        }
    }

    /// Next `message` or `exit` push.
    pub fn next_push(&mut self) -> Result<ServerFrame, ClientError> {
        if let Some(f) = self.pushes.pop_front() {
            return Ok(f);
        }
        match self.read()? {
            ServerFrame::Error { code, message, .. } => Err(ClientError::Server { code, message }),
            f if f.id().is_none() => Ok(f),
            f => Err(Self::unexpected(f)),
        }
    }

    /// Feeds the instance's messages to `on_message` until it exits.
    pub fn wait_exit(&mut self, instance: InstanceId, mut on_message: impl FnMut(&[u8])) -> Result<InstanceStatus, ClientError> {
        loop {
            match self.next_push()? {
                ServerFrame::Message { instance: i, data } if i == instance => on_message(&data),
                ServerFrame::Exit { instance: i, status } if i == instance => return Ok(status),
                _ => {}
            }
        }
    }
}
