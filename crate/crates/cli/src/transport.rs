//! Packet transports: `pipe:<path>` byte streams (files, FIFOs, `-` for
//! stdio) and `udp:<addr>` datagrams.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::time::Duration;

use splatlink_core::codec::{FramePacket, StreamParser, MAX_PAYLOAD_LEN, HEADER_LEN};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Pipe(PathBuf),
    Stdio,
    Udp(String),
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("pipe", "-")) => Ok(Endpoint::Stdio),
            Some(("pipe", p)) if !p.is_empty() => Ok(Endpoint::Pipe(PathBuf::from(p))),
            Some(("udp", a)) if !a.is_empty() => Ok(Endpoint::Udp(a.to_string())),
            _ => Err(format!("expected pipe:<path>, pipe:- or udp:<host:port>, got {s:?}")),
        }
    }
}

pub enum PacketWriter {
    Stream(Box<dyn Write>),
    Udp(UdpSocket),
}

impl PacketWriter {
    pub fn connect(ep: &Endpoint) -> Result<Self, CliError> {
        Ok(match ep {
            Endpoint::Pipe(p) => PacketWriter::Stream(Box::new(BufWriter::new(File::create(p)?))),
            Endpoint::Stdio => PacketWriter::Stream(Box::new(BufWriter::new(std::io::stdout()))),
            Endpoint::Udp(addr) => {
                let sock = UdpSocket::bind("0.0.0.0:0")?;
                sock.connect(addr.as_str())?;
                PacketWriter::Udp(sock)
            }
        })
    }

    pub fn send(&mut self, p: &FramePacket) -> Result<(), CliError> {
        let bytes = p.to_bytes();
        match self {
            PacketWriter::Stream(w) => w.write_all(&bytes)?,
            PacketWriter::Udp(s) => {
                s.send(&bytes)?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        if let PacketWriter::Stream(w) = self {
            w.flush()?;
        }
        Ok(())
    }
}

pub enum PacketReader {
    Stream {
        input: Box<dyn Read>,
        parser: StreamParser,
        eof: bool,
    },
    Udp {
        sock: UdpSocket,
        buf: Vec<u8>,
    },
}

impl PacketReader {
    pub fn listen(ep: &Endpoint, idle_timeout: Duration) -> Result<Self, CliError> {
        Ok(match ep {
            Endpoint::Pipe(p) => PacketReader::Stream {
                input: Box::new(File::open(p)?),
                parser: StreamParser::new(),
                eof: false,
            },
            Endpoint::Stdio => PacketReader::Stream {
                input: Box::new(std::io::stdin()),
                parser: StreamParser::new(),
                eof: false,
            },
            Endpoint::Udp(addr) => {
                let addr: SocketAddr = addr.parse().map_err(|e| CliError::Usage(format!("bad udp address {addr:?}: {e}")))?;
                let sock = UdpSocket::bind(addr)?;
                sock.set_read_timeout(Some(idle_timeout))?;
                PacketReader::Udp {
                    sock,
                    buf: vec![0; HEADER_LEN + MAX_PAYLOAD_LEN],
                }
            }
        })
    }

    /// Next packet, or `None` at end of stream or after the idle timeout.
    pub fn next(&mut self) -> Result<Option<FramePacket>, CliError> {
        match self {
            PacketReader::Stream { input, parser, eof } => loop {
                if let Some(p) = parser.next_packet()? {
                    return Ok(Some(p));
                }
                if *eof {
                    if parser.buffered() > 0 {
                        return Err(CliError::Protocol(format!("stream ended inside a packet ({} bytes left)", parser.buffered())));
                    }
                    return Ok(None);
                }
                let mut chunk = [0u8; 64 * 1024];
                let n = input.read(&mut chunk)?;
                if n == 0 {
                    *eof = true;
                } else {
                    parser.push(&chunk[..n]);
                }
            },
            PacketReader::Udp { sock, buf } => match sock.recv(buf) {
                Ok(n) => Ok(Some(FramePacket::from_bytes(&buf[..n])?)),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => Ok(None),
                Err(e) => Err(e.into()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_parse() {
        assert_eq!("pipe:/tmp/x".parse::<Endpoint>().unwrap(), Endpoint::Pipe("/tmp/x".into()));
        assert_eq!("pipe:-".parse::<Endpoint>().unwrap(), Endpoint::Stdio);
        assert_eq!("udp:127.0.0.1:9000".parse::<Endpoint>().unwrap(), Endpoint::Udp("127.0.0.1:9000".into()));
        assert!("tcp:1".parse::<Endpoint>().is_err());
        assert!("pipe:".parse::<Endpoint>().is_err());
    }
}
