//! Frame encoding and decoding.
//!
//! One frame per message; the decoder consumes exactly one frame per call
//! and retries partial reads until the frame completes. No proper prefix of
//! a valid frame decodes successfully.

use std::io::Read;

use serde::de::DeserializeOwned;
use thiserror::Error;

use super::{canonical_json, Message};

/// Decode-side sanity cap. Real traffic is small JSON records; anything this
/// large means a corrupted length field or a hostile peer.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CodecError {
    /// Stream ended cleanly at a frame boundary.
    #[error("connection closed")]
    Closed,
    /// Stream ended inside a frame.
    #[error("connection lost mid-frame")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame length {0} exceeds limit")]
    FrameTooLarge(u64),
    #[error("zero-length frame")]
    EmptyFrame,
    #[error("malformed payload for {kind}: {source}")]
    MalformedPayload {
        kind: &'static str,
        source: serde_json::Error,
    },
    #[error("serialize failed: {0}")]
    Serialize(serde_json::Error),
}

impl CodecError {
    /// Both clean closes and mid-frame truncation mean the peer is gone.
    pub fn is_connection_lost(&self) -> bool {
        matches!(self, CodecError::Closed | CodecError::Truncated)
    }
}

/// Encode one message into a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let payload = match msg {
        Message::Register(p) => canonical_json(p),
        Message::RegisterAck(p) => canonical_json(p),
        Message::TaskDispatch(p) => canonical_json(p),
        Message::TaskResult(p) => canonical_json(p),
        Message::Heartbeat(p) => canonical_json(p),
        Message::Suspend(p) => canonical_json(p),
        Message::Shutdown(p) => canonical_json(p),
        Message::Submit(p) => canonical_json(p),
        Message::SubmitAck(p) => canonical_json(p),
        Message::ResultNotify(p) => canonical_json(p),
        Message::StatsRequest(p) => canonical_json(p),
        Message::StatsReply(p) => canonical_json(p),
        Message::Error(p) => canonical_json(p),
    }
    .map_err(CodecError::Serialize)?;

    let payload = payload.into_bytes();
    let len = payload.len() as u64 + 1;
    if len > u32::MAX as u64 {
        return Err(CodecError::FrameTooLarge(len));
    }
    let mut frame = Vec::with_capacity(4 + len as usize);
    frame.extend_from_slice(&(len as u32).to_be_bytes());
    frame.push(msg.tag());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn parse<T: DeserializeOwned>(kind: &'static str, payload: &[u8]) -> Result<T, CodecError> {
    serde_json::from_slice(payload)
        .map_err(|source| CodecError::MalformedPayload { kind, source })
}

fn message_from_parts(tag: u8, payload: &[u8]) -> Result<Message, CodecError> {
    Ok(match tag {
        1 => Message::Register(parse("REGISTER", payload)?),
        2 => Message::RegisterAck(parse("REGISTER_ACK", payload)?),
        3 => Message::TaskDispatch(parse("TASK_DISPATCH", payload)?),
        4 => Message::TaskResult(parse("TASK_RESULT", payload)?),
        5 => Message::Heartbeat(parse("HEARTBEAT", payload)?),
        6 => Message::Suspend(parse("SUSPEND", payload)?),
        7 => Message::Shutdown(parse("SHUTDOWN", payload)?),
        8 => Message::Submit(parse("SUBMIT", payload)?),
        9 => Message::SubmitAck(parse("SUBMIT_ACK", payload)?),
        10 => Message::ResultNotify(parse("RESULT_NOTIFY", payload)?),
        11 => Message::StatsRequest(parse("STATS_REQUEST", payload)?),
        12 => Message::StatsReply(parse("STATS_REPLY", payload)?),
        13 => Message::Error(parse("ERROR", payload)?),
        other => return Err(CodecError::UnknownTag(other)),
    })
}

/// Read until `buf` is full. `Closed` if the stream ends before the first
/// byte, `Truncated` if it ends after.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8], mid_frame: bool) -> Result<(), CodecError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(if filled == 0 && !mid_frame {
                    CodecError::Closed
                } else {
                    CodecError::Truncated
                });
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(CodecError::Io(e)),
        }
    }
    Ok(())
}

/// Consume exactly one frame from `reader` and return the message.
pub fn decode<R: Read>(reader: &mut R) -> Result<Message, CodecError> {
    let mut len_buf = [0u8; 4];
    read_full(reader, &mut len_buf, false)?;
    let len = u32::from_be_bytes(len_buf);
    if len == 0 {
        return Err(CodecError::EmptyFrame);
    }
    if len > MAX_FRAME_LEN {
        return Err(CodecError::FrameTooLarge(len as u64));
    }
    let mut body = vec![0u8; len as usize];
    read_full(reader, &mut body, true)?;
    message_from_parts(body[0], &body[1..])
}

/// Decode one frame from a slice, returning the message and bytes consumed.
pub fn decode_from_slice(bytes: &[u8]) -> Result<(Message, usize), CodecError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let msg = decode(&mut cursor)?;
    Ok((msg, cursor.position() as usize))
}

/// Per-connection decoder; not shared across threads.
pub struct FrameReader<R: Read> {
    reader: R,
}

impl<R: Read> FrameReader<R> {
    pub fn new(reader: R) -> Self {
        Self { reader }
    }

    pub fn next_message(&mut self) -> Result<Message, CodecError> {
        decode(&mut self.reader)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{
        ErrorMsg, Heartbeat, Register, StatsRequest, Submit, TaskDescriptor, TaskDispatch,
    };
    use crate::protocol::{DataKind, DataRef};
    use proptest::prelude::*;

    fn heartbeat() -> Message {
        Message::Heartbeat(Heartbeat {
            executor_id: "e1".into(),
        })
    }

    #[test]
    fn length_field_counts_tag_plus_payload() {
        let frame = encode(&heartbeat()).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        assert_eq!(frame[4], 5); // HEARTBEAT tag
        // Payload is exactly the canonical record.
        assert_eq!(&frame[5..], br#"{"executor_id":"e1"}"#);
    }

    #[test]
    fn round_trip_each_kind_smoke() {
        let mut d = TaskDescriptor::new("t-1", "/bin/echo");
        d.args = vec!["a".into(), "b".into(), "c".into()];
        d.static_inputs.push(DataRef {
            logical_name: "lib".into(),
            source_uri: "/store/lib.bin".into(),
            kind: DataKind::Static,
            size_hint_bytes: Some(8 << 20),
        });
        d.dynamic_inputs.push(DataRef {
            logical_name: "in".into(),
            source_uri: "/store/in.dat".into(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let msgs = vec![
            Message::Register(Register {
                protocol_version: 1,
                slots: 4,
                address: "host:1".into(),
            }),
            Message::TaskDispatch(TaskDispatch {
                task: d,
                t_submitted: 10,
                t_dispatched: 20,
            }),
            Message::Submit(Submit { tasks: vec![] }),
            Message::StatsRequest(StatsRequest {}),
            Message::Error(ErrorMsg {
                code: "version-mismatch".into(),
                message: "expected 1".into(),
            }),
            heartbeat(),
        ];
        for m in msgs {
            let frame = encode(&m).unwrap();
            let (back, consumed) = decode_from_slice(&frame).unwrap();
            assert_eq!(consumed, frame.len());
            assert_eq!(back, m);
        }
    }

    #[test]
    fn dispatch_with_args_and_refs_round_trips_field_for_field() {
        let mut d = TaskDescriptor::new("task-42", "/usr/bin/app");
        d.args = vec!["--x".into(), "1".into(), "out.dat".into()];
        d.env.insert("K".into(), "V".into());
        d.static_inputs.push(DataRef {
            logical_name: "model".into(),
            source_uri: "/store/model".into(),
            kind: DataKind::Static,
            size_hint_bytes: Some(123),
        });
        d.dynamic_inputs.push(DataRef {
            logical_name: "frame".into(),
            source_uri: "/store/frame-42".into(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let msg = Message::TaskDispatch(TaskDispatch {
            task: d.clone(),
            t_submitted: 5,
            t_dispatched: 9,
        });
        let (back, _) = decode_from_slice(&encode(&msg).unwrap()).unwrap();
        match back {
            Message::TaskDispatch(td) => {
                assert_eq!(td.task, d);
                assert_eq!(td.t_submitted, 5);
                assert_eq!(td.t_dispatched, 9);
            }
            other => panic!("wrong kind: {}", other.kind_name()),
        }
    }

    #[test]
    fn empty_stream_is_connection_lost() {
        let err = decode(&mut std::io::Cursor::new(Vec::<u8>::new())).unwrap_err();
        assert!(err.is_connection_lost());
        assert!(matches!(err, CodecError::Closed));
    }

    #[test]
    fn unknown_tag_is_protocol_error() {
        let mut frame = encode(&heartbeat()).unwrap();
        frame[4] = 0xFF;
        let err = decode_from_slice(&frame).unwrap_err();
        assert!(matches!(err, CodecError::UnknownTag(0xFF)));
    }

    #[test]
    fn two_back_to_back_frames_decode_in_order() {
        let m1 = heartbeat();
        let m2 = Message::Error(ErrorMsg {
            code: "x".into(),
            message: "y".into(),
        });
        let mut stream = encode(&m1).unwrap();
        stream.extend(encode(&m2).unwrap());
        let mut cursor = std::io::Cursor::new(stream);
        assert_eq!(decode(&mut cursor).unwrap(), m1);
        assert_eq!(decode(&mut cursor).unwrap(), m2);
        assert!(decode(&mut cursor).unwrap_err().is_connection_lost());
    }

    #[test]
    fn every_proper_prefix_fails() {
        let frame = encode(&heartbeat()).unwrap();
        for cut in 0..frame.len() {
            let err = decode_from_slice(&frame[..cut]).unwrap_err();
            assert!(
                err.is_connection_lost(),
                "prefix of {} bytes gave {err:?}",
                cut
            );
        }
    }

    #[test]
    fn oversized_length_field_rejected() {
        let mut frame = Vec::new();
        frame.extend_from_slice(&u32::MAX.to_be_bytes());
        frame.push(5);
        assert!(matches!(
            decode_from_slice(&frame).unwrap_err(),
            CodecError::FrameTooLarge(_)
        ));
    }

    #[test]
    fn malformed_payload_rejected() {
        let payload = b"not json";
        let mut frame = Vec::new();
        frame.extend_from_slice(&((payload.len() as u32 + 1).to_be_bytes()));
        frame.push(5);
        frame.extend_from_slice(payload);
        assert!(matches!(
            decode_from_slice(&frame).unwrap_err(),
            CodecError::MalformedPayload { .. }
        ));
    }

    proptest! {
        #[test]
        fn decode_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
            let _ = decode_from_slice(&bytes);
        }

        #[test]
        fn heartbeat_ids_round_trip(id in "[a-z0-9:._-]{0,40}") {
            let m = Message::Heartbeat(Heartbeat { executor_id: id });
            let (back, _) = decode_from_slice(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn encoding_is_deterministic(id in "[a-z0-9]{1,16}", n in 0u32..1000) {
            let mut d = TaskDescriptor::new(id, "/bin/true");
            d.env.insert("B".into(), n.to_string());
            d.env.insert("A".into(), "v".into());
            let m = Message::TaskDispatch(TaskDispatch { task: d, t_submitted: 0, t_dispatched: 0 });
            prop_assert_eq!(encode(&m).unwrap(), encode(&m).unwrap());
        }
    }
}
