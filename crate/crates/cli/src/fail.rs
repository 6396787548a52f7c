//! Failure classes with fixed exit codes so shell harnesses can assert
//! on them: 2 config, 3 data, 4 numerical.

use tempoflow::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Config,
    Data,
    Numerical,
}

impl Class {
    pub fn exit_code(self) -> i32 {
        match self {
            Class::Config => 2,
            Class::Data => 3,
            Class::Numerical => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Class::Config => "config",
            Class::Data => "data",
            Class::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub msg: String,
}

impl CliError {
    pub fn new(class: Class, msg: impl Into<String>) -> Self {
        CliError {
            class,
            msg: msg.into(),
        }
    }

    /// The single machine-parsable line printed to stderr.
    pub fn render(&self) -> String {
        format!(
            "error: class={} msg=\"{}\"",
            self.class.name(),
            self.msg.replace('"', "'").replace('\n', " ")
        )
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let class = match &e {
            Error::NonFinite(_) => Class::Numerical,
            Error::Format { .. } | Error::Io(_) => Class::Data,
            // library contract violations at run time mean the loaded
            // data disagrees with itself
            Error::Contract(_) => Class::Data,
        };
        CliError::new(class, e.to_string())
    }
}

/// Re-class an error (e.g. contract violations during config validation).
pub fn as_config<T>(r: Result<T, Error>) -> Result<T, CliError> {
    r.map_err(|e| CliError::new(Class::Config, e.to_string()))
}
