//! One peer connection: handshake, a frame-reading thread, and a serialized
//! writer thread.
//!
//! Handshake, before any frame: the worker sends `EDA/1 <name>\n`, the master
//! answers `EDA/1 <master-name> <endpoint-id>\n` or `EDA/1 ERR <reason>\n`.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Sender};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use crate::ledger::Clock;
use crate::model::{Command, HardwareInfo};
use crate::wire::{
    decode_byte_payload, encode_byte_payload, file_frames, read_frame, ByteMessage, BytePayload, FilePayload, Frame,
    Inbound, PairingTable, PayloadIdGen, ReadyFile,
};

pub const PROTOCOL_TAG: &str = "EDA/1";
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_HANDSHAKE_LINE: usize = 512;

fn read_line_raw(stream: &mut TcpStream) -> io::Result<String> {
    // byte at a time so nothing after the newline is consumed
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if stream.read(&mut byte)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed during handshake"));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > MAX_HANDSHAKE_LINE {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "handshake line too long"));
        }
    }
    String::from_utf8(line).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "handshake is not UTF-8"))
}

fn bad_handshake(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Worker side. Returns the master's name and the endpoint id it assigned.
pub fn client_handshake(stream: &mut TcpStream, name: &str) -> io::Result<(String, String)> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    stream.write_all(format!("{PROTOCOL_TAG} {name}\n").as_bytes())?;
    let line = read_line_raw(stream)?;
    stream.set_read_timeout(None)?;
    let fields: Vec<&str> = line.split(' ').collect();
    match fields.as_slice() {
        [PROTOCOL_TAG, "ERR", reason @ ..] => Err(bad_handshake(format!("master refused: {}", reason.join(" ")))),
        [PROTOCOL_TAG, master, endpoint] => Ok((master.to_string(), endpoint.to_string())),
        _ => Err(bad_handshake(format!("unexpected handshake reply `{line}`"))),
    }
}

/// Master side. `admit` may refuse a worker name.
pub fn server_handshake(
    stream: &mut TcpStream,
    master: &str,
    endpoint_id: &str,
    admit: impl FnOnce(&str) -> Result<(), String>,
) -> io::Result<String> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let line = read_line_raw(stream)?;
    let name = match line.split(' ').collect::<Vec<_>>().as_slice() {
        [PROTOCOL_TAG, name] if !name.is_empty() => name.to_string(),
        _ => {
            let _ = stream.write_all(format!("{PROTOCOL_TAG} ERR bad hello\n").as_bytes());
            return Err(bad_handshake(format!("unexpected hello `{line}`")));
        }
    };
    if let Err(reason) = admit(&name) {
        let _ = stream.write_all(format!("{PROTOCOL_TAG} ERR {reason}\n").as_bytes());
        return Err(bad_handshake(format!("refused `{name}`: {reason}")));
    }
    stream.write_all(format!("{PROTOCOL_TAG} {master} {endpoint_id}\n").as_bytes())?;
    stream.set_read_timeout(None)?;
    Ok(name)
}

#[derive(Debug)]
pub enum LinkEvent {
    Command(Command),
    HardwareInfo(HardwareInfo),
    /// `announced_ms` is when the naming byte payload arrived, `completed_ms`
    /// when the last file frame did (both on the local clock).
    File { file: ReadyFile, announced_ms: u64, completed_ms: u64 },
    Closed { reason: Option<String> },
}

#[derive(Debug)]
pub enum Outbound {
    Bytes(BytePayload),
    File { command: Command, filename: String, content: Vec<u8> },
}

/// Handle for queueing outbound payloads. The connection closes once every
/// clone is dropped.
#[derive(Debug, Clone)]
pub struct LinkWriter {
    tx: Sender<Outbound>,
}

impl LinkWriter {
    pub fn send_command(&self, command: Command) {
        match encode_byte_payload(command, None) {
            Ok(p) => self.send(Outbound::Bytes(p)),
            Err(e) => warn!("not sending {command}: {e}"),
        }
    }

    pub fn send_hardware_info(&self, hw: &HardwareInfo) {
        self.send(Outbound::Bytes(BytePayload::hardware_info(hw)));
    }

    pub fn send_file(&self, command: Command, filename: &str, content: Vec<u8>) {
        self.send(Outbound::File { command, filename: filename.to_string(), content });
    }

    fn send(&self, msg: Outbound) {
        // a closed writer shows up as a Closed event on the reader side
        let _ = self.tx.send(msg);
    }
}

fn write_loop(stream: TcpStream, rx: mpsc::Receiver<Outbound>, chunk_size: usize) {
    let ids = PayloadIdGen::default();
    let mut out = BufWriter::new(match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            warn!("link writer: {e}");
            return;
        }
    });
    let mut buf = Vec::new();
    for msg in rx {
        buf.clear();
        match msg {
            Outbound::Bytes(p) => Frame::Bytes(p).encode_into(&mut buf),
            Outbound::File { command, filename, content } => {
                let payload_id = ids.next_id();
                match encode_byte_payload(command, Some((payload_id, &filename))) {
                    Ok(p) => Frame::Bytes(p).encode_into(&mut buf),
                    Err(e) => {
                        warn!("not sending `{filename}`: {e}");
                        continue;
                    }
                }
                for f in file_frames(&FilePayload { payload_id, content }, chunk_size) {
                    f.encode_into(&mut buf);
                }
            }
        }
        if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
            debug!("link writer stopped: {e}");
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn read_loop(stream: TcpStream, clock: Clock, emit: impl Fn(LinkEvent) -> bool) {
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            emit(LinkEvent::Closed { reason: Some(e.to_string()) });
            return;
        }
    });
    let mut pairing = PairingTable::new();
    let mut announced: HashMap<u64, u64> = HashMap::new();
    let reason = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break None,
            Err(e) => break Some(e.to_string()),
        };
        let now = clock.now_ms();
        if let Frame::Bytes(p) = &frame {
            if let Ok(ByteMessage::FileRef { payload_id, .. }) = decode_byte_payload(p) {
                announced.entry(payload_id).or_insert(now);
            }
        }
        let event = match pairing.on_frame(frame) {
            Ok(None) => continue,
            Ok(Some(Inbound::Command(c))) => LinkEvent::Command(c),
            Ok(Some(Inbound::HardwareInfo(hw))) => LinkEvent::HardwareInfo(hw),
            Ok(Some(Inbound::Ready(file))) => {
                let announced_ms = announced.remove(&file.payload_id).unwrap_or(now);
                LinkEvent::File { file, announced_ms, completed_ms: now }
            }
            Err(e) => break Some(e.to_string()),
        };
        if !emit(event) {
            break None;
        }
    };
    let _ = stream.shutdown(Shutdown::Both);
    emit(LinkEvent::Closed { reason });
}

/// Starts the reader and writer threads for an established connection.
/// Reader events are wrapped and sent to `events`.
pub fn spawn_link<E: Send + 'static>(
    stream: TcpStream,
    clock: Clock,
    chunk_size: usize,
    events: Sender<E>,
    wrap: impl Fn(LinkEvent) -> E + Send + 'static,
) -> io::Result<LinkWriter> {
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel();
    let write_half = stream.try_clone()?;
    thread::Builder::new().name("link-writer".into()).spawn(move || write_loop(write_half, rx, chunk_size))?;
    thread::Builder::new()
        .name("link-reader".into())
        .spawn(move || read_loop(stream, clock, |e| events.send(wrap(e)).is_ok()))?;
    Ok(LinkWriter { tx })
}
