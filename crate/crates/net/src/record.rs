//! Session recordings: `AVTRREC1`, then `{recv_t_ns u64, len u32, message}`
//! entries, little-endian. Every entry is flushed as it is written, so a
//! crash leaves a readable prefix.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::wire::{decode_message, encode_message, read_message, Hello, Message, Role, WireError, WireMessage};

pub const RECORDING_MAGIC: &[u8; 8] = b"AVTRREC1";
/// File name used inside a recording directory.
pub const RECORDING_FILE: &str = "session.avtrrec";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a recording (bad magic)")]
    BadMagic,
    #[error("entry {index} is truncated")]
    Truncated { index: usize },
    #[error("entry {index} timestamp goes backwards")]
    NonMonotone { index: usize },
    #[error("entry {index} is not a valid message: {source}")]
    BadMessage { index: usize, source: WireError },
}

pub struct Recorder {
    path: PathBuf,
    out: BufWriter<File>,
    last_t_ns: u64,
    entries: usize,
}

impl Recorder {
    /// Creates `dir/RECORDING_FILE`, replacing any previous recording.
    pub fn create_in(dir: impl AsRef<Path>) -> Result<Self, RecordError> {
        std::fs::create_dir_all(dir.as_ref())?;
        Self::create(dir.as_ref().join(RECORDING_FILE))
    }

    pub fn create(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        out.write_all(RECORDING_MAGIC)?;
        out.flush()?;
        Ok(Self {
            path: path.as_ref().to_path_buf(),
            out,
            last_t_ns: 0,
            entries: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    /// Appends one message. Timestamps are clamped to be non-decreasing.
    pub fn append(&mut self, recv_t_ns: u64, message: &[u8]) -> Result<(), RecordError> {
        let t = recv_t_ns.max(self.last_t_ns);
        self.out.write_all(&t.to_le_bytes())?;
        self.out.write_all(&(message.len() as u32).to_le_bytes())?;
        self.out.write_all(message)?;
        self.out.flush()?;
        self.last_t_ns = t;
        self.entries += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub recv_t_ns: u64,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn message(&self) -> Result<WireMessage, WireError> {
        decode_message(&self.bytes)
    }
}

/// Iterates over a recording's entries, validating each one. Iteration
/// stops after the first error.
pub struct RecordingReader<R> {
    src: R,
    index: usize,
    last_t_ns: u64,
    failed: bool,
}

impl RecordingReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> RecordingReader<R> {
    pub fn new(mut src: R) -> Result<Self, RecordError> {
        let mut magic = [0u8; 8];
        src.read_exact(&mut magic).map_err(|_| RecordError::BadMagic)?;
        if &magic != RECORDING_MAGIC {
            return Err(RecordError::BadMagic);
        }
        Ok(Self {
            src,
            index: 0,
            last_t_ns: 0,
            failed: false,
        })
    }

    fn next_entry(&mut self) -> Result<Option<Entry>, RecordError> {
        let mut head = [0u8; 12];
        let mut got = 0;
        while got < head.len() {
            match self.src.read(&mut head[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return Err(RecordError::Truncated { index: self.index }),
                n => got += n,
            }
        }
        let recv_t_ns = u64::from_le_bytes(head[..8].try_into().unwrap());
        let len = u32::from_le_bytes(head[8..].try_into().unwrap()) as usize;
        if len > crate::wire::MAX_PAYLOAD + crate::wire::HEADER_LEN {
            return Err(RecordError::Truncated { index: self.index });
        }
        let mut bytes = vec![0u8; len];
        self.src
            .read_exact(&mut bytes)
            .map_err(|_| RecordError::Truncated { index: self.index })?;
        if recv_t_ns < self.last_t_ns {
            return Err(RecordError::NonMonotone { index: self.index });
        }
        decode_message(&bytes).map_err(|source| RecordError::BadMessage {
            index: self.index,
            source,
        })?;
        self.last_t_ns = recv_t_ns;
        self.index += 1;
        Ok(Some(Entry { recv_t_ns, bytes }))
    }
}

impl<R: Read> Iterator for RecordingReader<R> {
    type Item = Result<Entry, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_entry() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Debug)]
pub struct ReplayReport {
    pub delivered: usize,
    /// Set when the file ended in a corrupt or truncated entry.
    pub error: Option<RecordError>,
}

/// Streams every entry to `sink`, spaced by the original receive-time gaps.
/// `sink` returning `false` stops the replay early.
pub fn replay<R: Read>(reader: RecordingReader<R>, mut sink: impl FnMut(&Entry) -> bool) -> ReplayReport {
    let start = Instant::now();
    let mut first: Option<u64> = None;
    let mut delivered = 0;
    for item in reader {
        match item {
            Ok(e) => {
                let t0 = *first.get_or_insert(e.recv_t_ns);
                let due = start + Duration::from_nanos(e.recv_t_ns - t0);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
                if !sink(&e) {
                    break;
                }
                delivered += 1;
            }
            Err(err) => {
                return ReplayReport {
                    delivered,
                    error: Some(err),
                }
            }
        }
    }
    ReplayReport { delivered, error: None }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("relay refused registration: {0}")]
    Rejected(String),
}

/// Plays a recording into a relay as device `device_id`, so that attached
/// clients see the recorded frames with their original spacing.
pub fn replay_to_relay(path: impl AsRef<Path>, relay: SocketAddr, device_id: u32) -> Result<ReplayReport, ReplayError> {
    let reader = RecordingReader::open(path)?;
    let mut stream = TcpStream::connect(relay)?;
    let _ = stream.set_nodelay(true);
    let hello: WireMessage = Message::Hello(Hello {
        role: Role::Device,
        id: device_id,
        name: "replay".into(),
    })
    .into();
    stream.write_all(&encode_message(&hello))?;
    match read_message(&mut stream)? {
        Some(WireMessage { body: Message::Ack { .. }, .. }) => {}
        other => return Err(ReplayError::Rejected(format!("{other:?}"))),
    }
    let mut write_err = None;
    let report = replay(reader, |e| match stream.write_all(&e.bytes) {
        Ok(()) => true,
        Err(err) => {
            write_err = Some(err);
            false
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(report)
}
