use thiserror::Error;

/// Errors raised by the tracking toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("track {track_id} has no observation at frame {frame}")]
    MissingObservation { track_id: u64, frame: u32 },

    #[error("box does not intersect the frame")]
    OutOfFrame,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no template placement fits inside the scan region")]
    RegionTooSmall,

    #[error("hypothesis graph has an empty target node set")]
    EmptyTargetSet,

    #[error("track and tracklet do not overlap in time")]
    NoOverlap,

    #[error("gap of {gap} frames exceeds the maximum of {max}")]
    GapTooLarge { gap: u32, max: u32 },

    #[error("track {0} received more than one tracklet")]
    ConflictingAssignment(u64),

    #[error("ground truth contains no observations")]
    EmptyGroundTruth,

    #[error("ground truth and predictions have no frames in common (EmptyOverlap)")]
    EmptyOverlap,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
