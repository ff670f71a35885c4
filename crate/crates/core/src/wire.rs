//! Wire protocol: payload text format, stream framing and payload pairing.
//!
//! Every unit on the stream is a frame:
//!
//! ```text
//! +--------+--------------------+-----------------+-------------+
//! | tag u8 | payload_id u64 BE  | length u32 BE   | body        |
//! +--------+--------------------+-----------------+-------------+
//! ```
//!
//! `0x01` frames carry a byte payload (payload id 0), `0x02` frames carry one
//! chunk of a file payload and a `0x03` frame with an empty body terminates
//! it. Chunks of different file payloads may interleave; chunks of one payload
//! arrive in order.
//!
//! Byte payloads are UTF-8 text `COMMAND` or `COMMAND:payloadId:filename`. A
//! file payload and the byte payload naming it may arrive in either order;
//! [`PairingTable`] joins them.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::model::{Command, HardwareInfo};

pub const TAG_BYTES: u8 = 0x01;
pub const TAG_FILE_CHUNK: u8 = 0x02;
pub const TAG_FILE_END: u8 = 0x03;
pub const HEADER_LEN: usize = 13;
/// Corruption guard on the length field.
pub const MAX_FRAME_BODY: u32 = 64 * 1024 * 1024;
pub const DEFAULT_CHUNK_SIZE: usize = 32 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("byte payload `{text}` has {fields} fields, expected 1 or 3")]
    FieldCount { text: String, fields: usize },
    #[error("invalid payload id `{0}`")]
    BadPayloadId(String),
    #[error("invalid filename `{0}`")]
    InvalidFilename(String),
    #[error("{0} must be paired with a file payload")]
    MissingFileRef(Command),
    #[error("{0} cannot be paired with a file payload")]
    UnexpectedFileRef(Command),
    #[error("invalid hardware info: {0}")]
    HardwareInfo(String),
    #[error("byte payload is not UTF-8")]
    NotUtf8,
    #[error("frame length {0} exceeds the {MAX_FRAME_BODY} byte limit")]
    FrameTooLarge(u32),
    #[error("unknown frame tag {0:#04x}")]
    UnknownTag(u8),
    #[error("byte payload frame carries payload id {0}")]
    ByteFrameWithId(u64),
    #[error("file end frame for payload {0} carries a body")]
    EndWithBody(u64),
    #[error("payload {0} registered twice")]
    DuplicatePayload(u64),
    #[error("payload {0} was already delivered")]
    PurgedPayload(u64),
}

#[derive(Debug, Error)]
pub enum ConnectionError {
    #[error("connection i/o: {0}")]
    Io(#[from] io::Error),
    #[error("stream truncated inside a frame ({0} trailing bytes)")]
    Truncated(usize),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Text of a byte payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BytePayload(String);

impl BytePayload {
    pub fn from_bytes(raw: Vec<u8>) -> Result<Self, ProtocolError> {
        String::from_utf8(raw).map(BytePayload).map_err(|_| ProtocolError::NotUtf8)
    }

    /// Wraps text without checking it; decoding validates.
    pub fn from_text(text: impl Into<String>) -> Self {
        BytePayload(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    /// `HW_INFO:` followed by the JSON-encoded hardware description.
    pub fn hardware_info(hw: &HardwareInfo) -> Self {
        let json = serde_json::to_string(hw).expect("hardware info serializes");
        BytePayload(format!("{}:{json}", Command::HwInfo))
    }
}

/// A complete file payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePayload {
    pub payload_id: u64,
    pub content: Vec<u8>,
}

/// Decoded byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ByteMessage {
    /// A command sent alone.
    Standalone(Command),
    /// A command naming a file payload.
    FileRef {
        command: Command,
        payload_id: u64,
        filename: String,
    },
    HardwareInfo(HardwareInfo),
}

pub fn is_valid_filename(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Builds `CMD` or `CMD:id:filename`.
pub fn encode_byte_payload(
    command: Command,
    file: Option<(u64, &str)>,
) -> Result<BytePayload, ProtocolError> {
    match (command, file) {
        (Command::HwInfo, _) => Err(ProtocolError::UnexpectedFileRef(command)),
        (c, None) if c.carries_file() => Err(ProtocolError::MissingFileRef(c)),
        (c, None) => Ok(BytePayload(c.as_str().to_string())),
        (c, Some(_)) if !c.carries_file() => Err(ProtocolError::UnexpectedFileRef(c)),
        (c, Some((id, filename))) => {
            if !is_valid_filename(filename) {
                return Err(ProtocolError::InvalidFilename(filename.to_string()));
            }
            Ok(BytePayload(format!("{c}:{id}:{filename}")))
        }
    }
}

pub fn decode_byte_payload(payload: &BytePayload) -> Result<ByteMessage, ProtocolError> {
    let text = payload.as_str();
    let (head, rest) = match text.split_once(':') {
        Some((h, r)) => (h, Some(r)),
        None => (text, None),
    };
    let command: Command = head
        .parse()
        .map_err(|_| ProtocolError::UnknownCommand(head.to_string()))?;
    if command == Command::HwInfo {
        let body = rest.ok_or(ProtocolError::HardwareInfo("missing body".into()))?;
        let hw: HardwareInfo =
            serde_json::from_str(body).map_err(|e| ProtocolError::HardwareInfo(e.to_string()))?;
        return Ok(ByteMessage::HardwareInfo(hw));
    }
    let fields: Vec<&str> = text.split(':').collect();
    match fields.as_slice() {
        [_] if command.carries_file() => Err(ProtocolError::MissingFileRef(command)),
        [_] => Ok(ByteMessage::Standalone(command)),
        [_, id, filename] => {
            if !command.carries_file() {
                return Err(ProtocolError::UnexpectedFileRef(command));
            }
            let payload_id = id
                .parse::<u64>()
                .map_err(|_| ProtocolError::BadPayloadId(id.to_string()))?;
            if !is_valid_filename(filename) {
                return Err(ProtocolError::InvalidFilename(filename.to_string()));
            }
            Ok(ByteMessage::FileRef { command, payload_id, filename: filename.to_string() })
        }
        _ => Err(ProtocolError::FieldCount { text: text.to_string(), fields: fields.len() }),
    }
}

/// One wire unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Bytes(BytePayload),
    FileChunk { payload_id: u64, data: Vec<u8> },
    FileEnd { payload_id: u64 },
}

impl Frame {
    pub fn tag(&self) -> u8 {
        match self {
            Frame::Bytes(_) => TAG_BYTES,
            Frame::FileChunk { .. } => TAG_FILE_CHUNK,
            Frame::FileEnd { .. } => TAG_FILE_END,
        }
    }

    fn parts(&self) -> (u64, &[u8]) {
        match self {
            Frame::Bytes(b) => (0, b.as_bytes()),
            Frame::FileChunk { payload_id, data } => (*payload_id, data),
            Frame::FileEnd { payload_id } => (*payload_id, &[]),
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let (id, body) = self.parts();
        out.reserve(HEADER_LEN + body.len());
        out.push(self.tag());
        out.extend_from_slice(&id.to_be_bytes());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(body);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn from_parts(tag: u8, payload_id: u64, body: Vec<u8>) -> Result<Frame, ProtocolError> {
        match tag {
            TAG_BYTES if payload_id != 0 => Err(ProtocolError::ByteFrameWithId(payload_id)),
            TAG_BYTES => Ok(Frame::Bytes(BytePayload::from_bytes(body)?)),
            TAG_FILE_CHUNK => Ok(Frame::FileChunk { payload_id, data: body }),
            TAG_FILE_END if !body.is_empty() => Err(ProtocolError::EndWithBody(payload_id)),
            TAG_FILE_END => Ok(Frame::FileEnd { payload_id }),
            other => Err(ProtocolError::UnknownTag(other)),
        }
    }
}

fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(u8, u64, u32), ProtocolError> {
    let tag = header[0];
    let id = u64::from_be_bytes(header[1..9].try_into().unwrap());
    let len = u32::from_be_bytes(header[9..13].try_into().unwrap());
    if len > MAX_FRAME_BODY {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    if !matches!(tag, TAG_BYTES | TAG_FILE_CHUNK | TAG_FILE_END) {
        return Err(ProtocolError::UnknownTag(tag));
    }
    Ok((tag, id, len))
}

/// Reads one frame. `Ok(None)` on a clean end of stream at a frame boundary.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Frame>, ConnectionError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ConnectionError::Truncated(filled)),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (tag, id, len) = parse_header(&header)?;
    let mut body = vec![0u8; len as usize];
    let mut got = 0;
    while got < body.len() {
        match reader.read(&mut body[got..]) {
            Ok(0) => return Err(ConnectionError::Truncated(HEADER_LEN + got)),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(Frame::from_parts(tag, id, body)?))
}

/// Decodes a complete byte stream into frames.
pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<Frame>, ConnectionError> {
    let mut frames = Vec::new();
    while let Some(frame) = read_frame(&mut bytes)? {
        frames.push(frame);
    }
    Ok(frames)
}

/// Frames for one file payload: chunks of at most `chunk_size` bytes followed
/// by the end marker. An empty file is only the end marker.
pub fn file_frames(file: &FilePayload, chunk_size: usize) -> Vec<Frame> {
    assert!(chunk_size > 0, "chunk size must be positive");
    file.content
        .chunks(chunk_size)
        .map(|c| Frame::FileChunk { payload_id: file.payload_id, data: c.to_vec() })
        .chain(std::iter::once(Frame::FileEnd { payload_id: file.payload_id }))
        .collect()
}

/// High-level payload event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Bytes(BytePayload),
    File(FilePayload),
}

pub fn frame_stream_encode(payloads: &[Payload], chunk_size: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for p in payloads {
        match p {
            Payload::Bytes(b) => Frame::Bytes(b.clone()).encode_into(&mut out),
            Payload::File(f) => file_frames(f, chunk_size)
                .iter()
                .for_each(|fr| fr.encode_into(&mut out)),
        }
    }
    out
}

/// Inverse of [`frame_stream_encode`]; a file payload is emitted at its end frame.
pub fn frame_stream_decode(bytes: &[u8]) -> Result<Vec<Payload>, ConnectionError> {
    let mut partial: HashMap<u64, Vec<u8>> = HashMap::new();
    let mut out = Vec::new();
    for frame in decode_frames(bytes)? {
        match frame {
            Frame::Bytes(b) => out.push(Payload::Bytes(b)),
            Frame::FileChunk { payload_id, data } => {
                partial.entry(payload_id).or_default().extend_from_slice(&data)
            }
            Frame::FileEnd { payload_id } => out.push(Payload::File(FilePayload {
                payload_id,
                content: partial.remove(&payload_id).unwrap_or_default(),
            })),
        }
    }
    Ok(out)
}

/// Per-sender payload id source; ids start at 1 and are never reused.
#[derive(Debug)]
pub struct PayloadIdGen(AtomicU64);

impl Default for PayloadIdGen {
    fn default() -> Self {
        PayloadIdGen(AtomicU64::new(1))
    }
}

impl PayloadIdGen {
    pub fn next_id(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

/// A file whose payload and naming byte payload have both arrived.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReadyFile {
    pub payload_id: u64,
    pub filename: String,
    pub command: Command,
    pub content: Vec<u8>,
}

/// What a received frame amounted to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    /// A paired file is ready; the receiver owes the sender a COMPLETE.
    Ready(ReadyFile),
    /// A standalone command.
    Command(Command),
    HardwareInfo(HardwareInfo),
}

/// Joins file payloads with the byte payloads that name them.
#[derive(Debug, Default)]
pub struct PairingTable {
    incoming_files: HashMap<u64, Vec<u8>>,
    completed_files: HashMap<u64, FilePayload>,
    pending_filenames: HashMap<u64, String>,
    pending_commands: HashMap<u64, Command>,
    delivered: HashSet<u64>,
}

impl PairingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_frame(&mut self, frame: Frame) -> Result<Option<Inbound>, ProtocolError> {
        match frame {
            Frame::Bytes(b) => self.on_byte_payload(&b),
            Frame::FileChunk { payload_id, data } => {
                self.on_file_chunk(payload_id, &data)?;
                Ok(None)
            }
            Frame::FileEnd { payload_id } => Ok(self.on_file_end(payload_id)?.map(Inbound::Ready)),
        }
    }

    pub fn on_byte_payload(&mut self, payload: &BytePayload) -> Result<Option<Inbound>, ProtocolError> {
        match decode_byte_payload(payload)? {
            ByteMessage::Standalone(c) => Ok(Some(Inbound::Command(c))),
            ByteMessage::HardwareInfo(hw) => Ok(Some(Inbound::HardwareInfo(hw))),
            ByteMessage::FileRef { command, payload_id, filename } => {
                if self.delivered.contains(&payload_id) {
                    return Err(ProtocolError::PurgedPayload(payload_id));
                }
                if self.pending_filenames.contains_key(&payload_id) {
                    return Err(ProtocolError::DuplicatePayload(payload_id));
                }
                self.pending_filenames.insert(payload_id, filename);
                self.pending_commands.insert(payload_id, command);
                Ok(self.try_emit(payload_id).map(Inbound::Ready))
            }
        }
    }

    pub fn on_file_chunk(&mut self, payload_id: u64, data: &[u8]) -> Result<(), ProtocolError> {
        self.check_reopen(payload_id)?;
        self.incoming_files.entry(payload_id).or_default().extend_from_slice(data);
        Ok(())
    }

    pub fn on_file_end(&mut self, payload_id: u64) -> Result<Option<ReadyFile>, ProtocolError> {
        self.check_reopen(payload_id)?;
        let content = self.incoming_files.remove(&payload_id).unwrap_or_default();
        self.completed_files.insert(payload_id, FilePayload { payload_id, content });
        Ok(self.try_emit(payload_id))
    }

    fn check_reopen(&self, payload_id: u64) -> Result<(), ProtocolError> {
        if self.delivered.contains(&payload_id) {
            Err(ProtocolError::PurgedPayload(payload_id))
        } else if self.completed_files.contains_key(&payload_id) {
            Err(ProtocolError::DuplicatePayload(payload_id))
        } else {
            Ok(())
        }
    }

    fn try_emit(&mut self, id: u64) -> Option<ReadyFile> {
        let ready = self.completed_files.contains_key(&id)
            && self.pending_filenames.contains_key(&id)
            && self.pending_commands.contains_key(&id);
        if !ready {
            return None;
        }
        let file = self.completed_files.remove(&id)?;
        let filename = self.pending_filenames.remove(&id)?;
        let command = self.pending_commands.remove(&id)?;
        self.delivered.insert(id);
        Some(ReadyFile { payload_id: id, filename, command, content: file.content })
    }

    /// Whether `id` is in any of the four pairing maps.
    pub fn tracks(&self, id: u64) -> bool {
        self.incoming_files.contains_key(&id)
            || self.completed_files.contains_key(&id)
            || self.pending_filenames.contains_key(&id)
            || self.pending_commands.contains_key(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.incoming_files.is_empty()
            && self.completed_files.is_empty()
            && self.pending_filenames.is_empty()
            && self.pending_commands.is_empty()
    }
}
