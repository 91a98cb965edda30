use std::path::{Path, PathBuf};

use gsv_core::container::ContainerError;
use gsv_stream::StreamError;

#[derive(Debug)]
pub enum CliError {
    Core(gsv_core::Error),
    Stream(StreamError),
    Usage(String),
    Io(PathBuf, std::io::Error),
}

impl From<gsv_core::Error> for CliError {
    fn from(e: gsv_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Decode(e) => CliError::Core(e),
            StreamError::Container(e) => CliError::Core(e.into()),
            e => CliError::Stream(e),
        }
    }
}

/// Lifts any core module error into [`CliError`].
pub fn core<E: Into<gsv_core::Error>>(e: E) -> CliError {
    CliError::Core(e.into())
}

pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

impl CliError {
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.module(),
            CliError::Stream(_) => "stream-svc",
            CliError::Usage(_) | CliError::Io(..) => "cli",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Stream(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
            CliError::Io(p, e) => format!("{}: {e}", p.display()),
        }
    }

    /// `error module=M [group=G layer=L channel=C] message="..."` on one line;
    /// the message is a JSON string.
    pub fn line(&self) -> String {
        let mut s = format!("error module={}", self.module());
        if let CliError::Core(gsv_core::Error::Container(ContainerError::Payload { group, layer, slot, .. })) = self {
            s.push_str(&format!(" group={group} layer={layer} channel={slot}"));
        }
        s.push_str(" message=");
        s.push_str(&serde_json::to_string(&self.message()).expect("string serializes"));
        s
    }
}
