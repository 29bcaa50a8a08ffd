use std::fmt;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<bonn::Error> for Failure {
    fn from(e: bonn::Error) -> Self {
        use bonn::Error as E;
        let code = match &e {
            E::Training { .. } | E::NonFinite(_) | E::Domain(_) => EXIT_NUMERIC,
            E::Format { .. } | E::Io(_) => EXIT_IO,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}

/// Data that cannot be read maps to the usage exit code.
pub fn data_failure(e: bonn::Error) -> Failure {
    match e {
        bonn::Error::Io(io) => Failure::usage(format!("cannot load data: {io}")),
        other => other.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
