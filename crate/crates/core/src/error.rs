use std::fmt;

/// Where a non-finite value was first observed.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSite {
    /// Inner step index (0-based) or `None` when outside the inner loop.
    pub step: Option<usize>,
    /// Task position inside the meta-batch, when known.
    pub task: Option<usize>,
    pub what: &'static str,
}

impl fmt::Display for DivergenceSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite {}", self.what)?;
        if let Some(task) = self.task {
            write!(f, " in task {task}")?;
        }
        if let Some(step) = self.step {
            write!(f, " at inner step {step}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Divergence(DivergenceSite),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn diverged(what: &'static str, step: Option<usize>) -> Self {
        Error::Divergence(DivergenceSite { step, task: None, what })
    }

    /// Attaches a task index to a divergence error; other errors pass through.
    pub fn in_task(self, task: usize) -> Self {
        match self {
            Error::Divergence(mut site) => {
                site.task.get_or_insert(task);
                Error::Divergence(site)
            }
            other => other,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
