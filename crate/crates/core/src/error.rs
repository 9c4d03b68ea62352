use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (sensor, grid, strip count, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// A non-finite value showed up during evaluation or differentiation.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Malformed user input (files, image pairs).
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}

/// Read a text file, naming the path in the error.
pub(crate) fn read_text(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|err| {
        Error::Io(std::io::Error::new(
            err.kind(),
            format!("{}: {err}", path.display()),
        ))
    })
}

pub type Result<T> = std::result::Result<T, Error>;
