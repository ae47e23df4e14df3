use splatlink_core::bench::BenchError;
use splatlink_core::calibrate::CalibrateError;
use splatlink_core::codec::CodecError;
use splatlink_core::motion::TraceError;
use splatlink_core::netsim::NetError;
use splatlink_core::package::PackageError;
use splatlink_core::params::ParamError;
use splatlink_core::receiver::ReceiverError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROTOCOL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Protocol(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Protocol(_) => EXIT_PROTOCOL,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o error: {e}"))
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Protocol(_) | CodecError::Framing { .. } => CliError::Protocol(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) | NetError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            NetError::Transition { .. } | NetError::HandshakeTimeout(_) => CliError::Protocol(e.to_string()),
            NetError::Codec(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) => CliError::Usage(e.to_string()),
            BenchError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(PackageError, TraceError, ParamError, ReceiverError, CalibrateError, serde_json::Error);
