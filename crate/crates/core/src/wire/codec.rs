use std::io::Read;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FEDC";
pub const VERSION: u8 = 1;
/// magic + version + msg_type + payload_len
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
/// Frames announcing a larger payload are refused before buffering.
pub const DEFAULT_MAX_PAYLOAD: usize = 1 << 30;

pub const HELLO: u8 = 1;
pub const TASK: u8 = 2;
pub const UPDATE: u8 = 3;
pub const VAL_REQUEST: u8 = 4;
pub const VAL_RESPONSE: u8 = 5;
pub const FINAL: u8 = 6;
pub const ERROR: u8 = 7;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    /// Not an error as such: the caller should supply more bytes.
    #[error("incomplete frame: need {needed} more byte(s)")]
    Incomplete { needed: usize },

    #[error("protocol error: bad magic {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("integrity error: crc {actual:08x} does not match {expected:08x}")]
    Integrity { expected: u32, actual: u32 },

    #[error("version error: {0}")]
    Version(String),

    #[error("protocol error: malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },

    #[error("size error: {0}")]
    Size(String),
}

/// Who sent the frame is implied by its type; collaborators never send
/// anything but HELLO, UPDATE, VAL_RESPONSE and ERROR.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        institution_id: u32,
        train_count: u32,
        val_count: u32,
    },
    Task {
        round_index: u32,
        strategy_tag: u8,
        epochs: u32,
        topology_hash: u32,
        params: Vec<f32>,
    },
    Update {
        round_index: u32,
        n_samples: u32,
        params: Vec<f32>,
        /// NaN when nothing was measured.
        local_val_dice: f64,
    },
    ValRequest {
        params: Vec<f32>,
    },
    ValResponse {
        val_dice: f64,
        val_count: u32,
    },
    Final {
        params: Vec<f32>,
    },
    Error {
        code: u16,
        text: String,
    },
}

pub mod error_code {
    pub const DUPLICATE_INSTITUTION: u16 = 1;
    pub const ROSTER_MISMATCH: u16 = 2;
    pub const TOPOLOGY_MISMATCH: u16 = 3;
    pub const ABORTED: u16 = 4;
    pub const INTERNAL: u16 = 5;
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => HELLO,
            Message::Task { .. } => TASK,
            Message::Update { .. } => UPDATE,
            Message::ValRequest { .. } => VAL_REQUEST,
            Message::ValResponse { .. } => VAL_RESPONSE,
            Message::Final { .. } => FINAL,
            Message::Error { .. } => ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        type_name(self.msg_type())
    }
}

pub fn type_name(msg_type: u8) -> &'static str {
    match msg_type {
        HELLO => "HELLO",
        TASK => "TASK",
        UPDATE => "UPDATE",
        VAL_REQUEST => "VAL_REQUEST",
        VAL_RESPONSE => "VAL_RESPONSE",
        FINAL => "FINAL",
        ERROR => "ERROR",
        _ => "unknown",
    }
}

fn put_params(out: &mut Vec<u8>, params: &[f32]) {
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::Hello {
            institution_id,
            train_count,
            val_count,
        } => {
            p.extend_from_slice(&institution_id.to_le_bytes());
            p.extend_from_slice(&train_count.to_le_bytes());
            p.extend_from_slice(&val_count.to_le_bytes());
        }
        Message::Task {
            round_index,
            strategy_tag,
            epochs,
            topology_hash,
            params,
        } => {
            p.extend_from_slice(&round_index.to_le_bytes());
            p.push(*strategy_tag);
            p.extend_from_slice(&epochs.to_le_bytes());
            p.extend_from_slice(&topology_hash.to_le_bytes());
            put_params(&mut p, params);
        }
        Message::Update {
            round_index,
            n_samples,
            params,
            local_val_dice,
        } => {
            p.extend_from_slice(&round_index.to_le_bytes());
            p.extend_from_slice(&n_samples.to_le_bytes());
            put_params(&mut p, params);
            p.extend_from_slice(&local_val_dice.to_le_bytes());
        }
        Message::ValRequest { params } | Message::Final { params } => put_params(&mut p, params),
        Message::ValResponse {
            val_dice,
            val_count,
        } => {
            p.extend_from_slice(&val_dice.to_le_bytes());
            p.extend_from_slice(&val_count.to_le_bytes());
        }
        Message::Error { code, text } => {
            p.extend_from_slice(&code.to_le_bytes());
            p.extend_from_slice(&(text.len() as u32).to_le_bytes());
            p.extend_from_slice(text.as_bytes());
        }
    }
    p
}

fn crc(msg_type: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[msg_type]);
    h.update(payload);
    h.finalize()
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    encode_raw(msg.msg_type(), &encode_payload(msg))
}

/// Frames an arbitrary payload under `msg_type`.
pub fn encode_raw(msg_type: u8, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let len = u32::try_from(payload.len())
        .map_err(|_| WireError::Size(format!("{}-byte payload exceeds u32", payload.len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc(msg_type, payload).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    kind: &'static str,
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.bytes.len() < n {
            return Err(
                self.malformed(format!("needs {n} more byte(s), {} left", self.bytes.len()))
            );
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn malformed(&self, reason: String) -> WireError {
        WireError::Malformed {
            kind: self.kind,
            reason,
        }
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn params(&mut self) -> Result<Vec<f32>, WireError> {
        let count = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let bytes = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .filter(|&b| b <= self.bytes.len())
            .ok_or_else(|| {
                self.malformed(format!("parameter count {count} overruns the payload"))
            })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<(), WireError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} trailing byte(s)", self.bytes.len())))
        }
    }
}

fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor {
        kind: type_name(ty),
        bytes: payload,
    };
    let msg = match ty {
        HELLO => Message::Hello {
            institution_id: c.u32()?,
            train_count: c.u32()?,
            val_count: c.u32()?,
        },
        TASK => Message::Task {
            round_index: c.u32()?,
            strategy_tag: c.u8()?,
            epochs: c.u32()?,
            topology_hash: c.u32()?,
            params: c.params()?,
        },
        UPDATE => Message::Update {
            round_index: c.u32()?,
            n_samples: c.u32()?,
            params: c.params()?,
            local_val_dice: c.f64()?,
        },
        VAL_REQUEST => Message::ValRequest {
            params: c.params()?,
        },
        VAL_RESPONSE => Message::ValResponse {
            val_dice: c.f64()?,
            val_count: c.u32()?,
        },
        FINAL => Message::Final {
            params: c.params()?,
        },
        ERROR => {
            let code = c.u16()?;
            let len = c.u32()? as usize;
            let raw = c.take(len)?;
            let text = String::from_utf8(raw.to_vec())
                .map_err(|_| c.malformed("error text is not UTF-8".into()))?;
            Message::Error { code, text }
        }
        other => return Err(WireError::Version(format!("unknown message type {other}"))),
    };
    c.finish()?;
    Ok(msg)
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes it occupied. Never panics.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    decode_frame_limited(bytes, DEFAULT_MAX_PAYLOAD)
}

pub fn decode_frame_limited(
    bytes: &[u8],
    max_payload: usize,
) -> Result<(Message, usize), WireError> {
    let (ty, payload, used) = decode_raw(bytes, max_payload)?;
    Ok((decode_payload(ty, payload)?, used))
}

/// Checks framing and CRC and returns `(msg_type, payload, frame_len)`
/// without interpreting the payload.
pub fn decode_raw(bytes: &[u8], max_payload: usize) -> Result<(u8, &[u8], usize), WireError> {
    let seen = bytes.len().min(4);
    if bytes[..seen] != MAGIC[..seen] {
        return Err(WireError::BadMagic(bytes[..seen].to_vec()));
    }
    if bytes.len() > 4 && bytes[4] != VERSION {
        return Err(WireError::Version(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let ty = bytes[5];
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if len > max_payload {
        return Err(WireError::Size(format!(
            "payload of {len} bytes exceeds the {max_payload}-byte limit"
        )));
    }
    let total = HEADER_LEN + len + TRAILER_LEN;
    if bytes.len() < total {
        return Err(WireError::Incomplete {
            needed: total - bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let expected = u32::from_le_bytes(bytes[HEADER_LEN + len..total].try_into().unwrap());
    let actual = crc(ty, payload);
    if expected != actual {
        return Err(WireError::Integrity { expected, actual });
    }
    Ok((ty, payload, total))
}

/// Incremental decoder for a byte stream cut at arbitrary points.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
    max_payload: usize,
}

impl Decoder {
    pub fn new() -> Self {
        Self::with_max_payload(DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(max_payload: usize) -> Self {
        Self {
            buf: Vec::new(),
            max_payload,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet decoded.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// The next complete message, or `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match decode_frame_limited(&self.buf, self.max_payload) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(WireError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Reads whole messages from a blocking byte source.
pub struct FrameReader<R> {
    inner: R,
    decoder: Decoder,
    chunk: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            decoder: Decoder::new(),
            chunk: vec![0; 64 * 1024],
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Blocks until a message arrives. A clean end of stream between frames
    /// yields `Ok(None)`; one inside a frame is an `UnexpectedEof` error.
    pub fn read_message(&mut self) -> crate::Result<Option<Message>> {
        loop {
            if let Some(msg) = self.decoder.next_message()? {
                return Ok(Some(msg));
            }
            let n = self.inner.read(&mut self.chunk)?;
            if n == 0 {
                if self.decoder.buffered() == 0 {
                    return Ok(None);
                }
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "stream ended inside a frame",
                )
                .into());
            }
            self.decoder.push(&self.chunk[..n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_header_bytes() {
        let f = encode_frame(&Message::Hello {
            institution_id: 2,
            train_count: 11,
            val_count: 2,
        })
        .unwrap();
        assert_eq!(&f[..6], &[0x46, 0x45, 0x44, 0x43, 0x01, 0x01]);
        assert_eq!(&f[6..10], &12u32.to_le_bytes());
        assert_eq!(f.len(), 26);
    }

    #[test]
    fn empty_payload_crc_covers_type_only() {
        let f = encode_raw(FINAL, &[]).unwrap();
        assert_eq!(&f[6..10], &[0, 0, 0, 0]);
        assert_eq!(&f[10..], &crc32fast::hash(&[FINAL]).to_le_bytes());
        let (ty, payload, used) = decode_raw(&f, DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!((ty, payload, used), (FINAL, &[][..], 14));
        // FINAL needs at least a parameter count.
        assert!(matches!(decode_frame(&f), Err(WireError::Malformed { .. })));
    }

    #[test]
    fn unknown_type_and_version() {
        let mut f = encode_frame(&Message::Final { params: vec![] }).unwrap();
        f[4] = 2;
        assert!(matches!(decode_frame(&f), Err(WireError::Version(_))));
        let g = encode_raw(99, &[]).unwrap();
        assert!(matches!(decode_frame(&g), Err(WireError::Version(_))));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode_frame(b"FEDX"), Err(WireError::BadMagic(_))));
        assert!(matches!(decode_frame(b"X"), Err(WireError::BadMagic(_))));
        assert!(matches!(
            decode_frame(b""),
            Err(WireError::Incomplete { .. })
        ));
    }

    #[test]
    fn oversized_announcement_is_refused() {
        let mut f = MAGIC.to_vec();
        f.extend_from_slice(&[VERSION, FINAL]);
        f.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_frame_limited(&f, 1 << 20),
            Err(WireError::Size(_))
        ));
    }

    #[test]
    fn params_count_overrun() {
        let mut payload = 1_000_000u64.to_le_bytes().to_vec();
        payload.extend_from_slice(&[0; 8]);
        let mut f = MAGIC.to_vec();
        f.extend_from_slice(&[VERSION, FINAL]);
        f.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        f.extend_from_slice(&payload);
        f.extend_from_slice(&crc(FINAL, &payload).to_le_bytes());
        assert!(matches!(decode_frame(&f), Err(WireError::Malformed { .. })));
    }
}
