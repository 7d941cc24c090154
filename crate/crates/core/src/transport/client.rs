//! Blocking line clients for the rack instruments.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::resource::ResourceId;
use super::server::BUSY_REPLY;
use crate::scpi::expected_responses;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
pub const READ_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {target}: {source}")]
    Connect {
        target: String,
        #[source]
        source: std::io::Error,
    },
    #[error("instrument is busy with another client")]
    Busy,
    #[error("connection closed by instrument")]
    Closed,
    #[error("timed out waiting for a response")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct LineClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl LineClient {
    pub fn connect(resource: &ResourceId) -> Result<Self, ClientError> {
        let target = format!("{}:{}", resource.host, resource.port);
        let connect_err = |source| ClientError::Connect { target: target.clone(), source };
        let addrs: Vec<_> = target.to_socket_addrs().map_err(connect_err)?.collect();
        let mut last = std::io::Error::new(ErrorKind::NotFound, "no address resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(READ_TIMEOUT))?;
                    stream.set_nodelay(true)?;
                    let writer = stream.try_clone()?;
                    return Ok(Self { reader: BufReader::new(stream), writer });
                }
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    pub fn send(&mut self, line: &str) -> Result<(), ClientError> {
        let mut msg = String::with_capacity(line.len() + 1);
        msg.push_str(line);
        msg.push('\n');
        self.writer.write_all(msg.as_bytes()).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset => ClientError::Closed,
            _ => ClientError::Io(e),
        })
    }

    pub fn read_line(&mut self) -> Result<String, ClientError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(ClientError::Closed),
            Ok(_) => {
                let line = line.trim_end_matches(['\n', '\r']).to_string();
                if line == BUSY_REPLY {
                    Err(ClientError::Busy)
                } else {
                    Ok(line)
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Err(ClientError::Timeout),
            Err(e) if e.kind() == ErrorKind::ConnectionReset => Err(ClientError::Closed),
            Err(e) => Err(ClientError::Io(e)),
        }
    }

    pub fn close(self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

/// SCPI session: reads exactly one line per query command sent.
#[derive(Debug)]
pub struct ScpiClient(LineClient);

impl ScpiClient {
    pub fn connect(resource: &ResourceId) -> Result<Self, ClientError> {
        LineClient::connect(resource).map(Self)
    }

    /// Sends a program message and collects its responses.
    pub fn exchange(&mut self, line: &str) -> Result<Vec<String>, ClientError> {
        self.0.send(line)?;
        (0..expected_responses(line)).map(|_| self.0.read_line()).collect()
    }

    pub fn write(&mut self, line: &str) -> Result<(), ClientError> {
        self.exchange(line).map(|_| ())
    }

    /// Sends a single query and returns its response line.
    pub fn query(&mut self, line: &str) -> Result<String, ClientError> {
        let mut lines = self.exchange(line)?;
        Ok(if lines.is_empty() { String::new() } else { lines.remove(0) })
    }

    /// Pops the instrument error queue until it reports no error.
    pub fn drain_errors(&mut self, max: usize) -> Result<Vec<String>, ClientError> {
        let mut errors = Vec::new();
        for _ in 0..max {
            let e = self.query(":SYST:ERR?")?;
            if e.starts_with("0,") || e.starts_with("+0,") {
                break;
            }
            errors.push(e);
        }
        Ok(errors)
    }

    pub fn close(self) {
        self.0.close()
    }
}

/// Stage session: every command gets exactly one reply.
#[derive(Debug)]
pub struct StageClient(LineClient);

impl StageClient {
    pub fn connect(resource: &ResourceId) -> Result<Self, ClientError> {
        LineClient::connect(resource).map(Self)
    }

    pub fn command(&mut self, line: &str) -> Result<String, ClientError> {
        self.0.send(line)?;
        self.0.read_line()
    }

    pub fn close(self) {
        self.0.close()
    }
}
