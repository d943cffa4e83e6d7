//! Framed binary protocol between an aggregator and its collaborators.
//!
//! Every frame is `"FEDC" | version u8 | msg_type u8 | payload_len u32 |
//! payload | crc32 u32`, little-endian, with the CRC taken over the type byte
//! and the payload.

mod codec;
mod net;

pub use codec::{
    decode_frame, decode_frame_limited, decode_raw, encode_frame, encode_raw, error_code,
    type_name, Decoder, FrameReader, Message, WireError, DEFAULT_MAX_PAYLOAD, ERROR, FINAL,
    HEADER_LEN, HELLO, MAGIC, TASK, TRAILER_LEN, UPDATE, VAL_REQUEST, VAL_RESPONSE, VERSION,
};
pub use net::{
    aggregator_serve, collaborator_run, strategy_from_tag, strategy_tag, CollaboratorOptions,
    CollaboratorReport, RemoteExecutor, ServeOptions, DEFAULT_TIMEOUT,
};
