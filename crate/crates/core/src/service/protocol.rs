//! Length-prefixed frames: magic, version, type, JSON header and binary blob.

use serde_json::Value;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FALC";
pub const VERSION: u8 = 1;
/// Upper bound on one encoded frame, bytes.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;
const PREFIX: usize = 4 + 1 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    HelloAck = 0x02,
    CaptureBegin = 0x10,
    CaptureFrame = 0x11,
    CaptureEnd = 0x12,
    SelectAsset = 0x13,
    Progress = 0x20,
    ModelReady = 0x21,
    ModelDownload = 0x22,
    InferRequest = 0x30,
    InferResponse = 0x31,
    RenderAndInfer = 0x32,
    RenderResult = 0x33,
    Error = 0x7F,
}

impl MsgType {
    pub const ALL: [MsgType; 14] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::CaptureBegin,
        MsgType::CaptureFrame,
        MsgType::CaptureEnd,
        MsgType::SelectAsset,
        MsgType::Progress,
        MsgType::ModelReady,
        MsgType::ModelDownload,
        MsgType::InferRequest,
        MsgType::InferResponse,
        MsgType::RenderAndInfer,
        MsgType::RenderResult,
        MsgType::Error,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == code)
    }

    /// Messages only the server may send.
    pub fn is_server_only(self) -> bool {
        matches!(
            self,
            MsgType::HelloAck
                | MsgType::Progress
                | MsgType::ModelReady
                | MsgType::InferResponse
                | MsgType::RenderResult
                | MsgType::Error
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::HelloAck => "HELLO_ACK",
            MsgType::CaptureBegin => "CAPTURE_BEGIN",
            MsgType::CaptureFrame => "CAPTURE_FRAME",
            MsgType::CaptureEnd => "CAPTURE_END",
            MsgType::SelectAsset => "SELECT_ASSET",
            MsgType::Progress => "PROGRESS",
            MsgType::ModelReady => "MODEL_READY",
            MsgType::ModelDownload => "MODEL_DOWNLOAD",
            MsgType::InferRequest => "INFER_REQUEST",
            MsgType::InferResponse => "INFER_RESPONSE",
            MsgType::RenderAndInfer => "RENDER_AND_INFER",
            MsgType::RenderResult => "RENDER_RESULT",
            MsgType::Error => "ERROR",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversize(usize),
    #[error("header is not valid JSON: {0}")]
    BadHeader(String),
    #[error("message carries {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("message holds an incomplete frame of {0} bytes")]
    Incomplete(usize),
}

/// One protocol message. The header is kept as the exact JSON bytes received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolFrame {
    pub msg_type: MsgType,
    header: Vec<u8>,
    pub blob: Vec<u8>,
}

impl ProtocolFrame {
    pub fn new(msg_type: MsgType, header: &Value, blob: Vec<u8>) -> Self {
        Self {
            msg_type,
            header: serde_json::to_vec(header).expect("JSON value serializes"),
            blob,
        }
    }

    /// Uses `header` verbatim after checking it parses.
    pub fn from_raw(msg_type: MsgType, header: Vec<u8>, blob: Vec<u8>) -> Result<Self, ProtocolError> {
        serde_json::from_slice::<Value>(&header).map_err(|e| ProtocolError::BadHeader(e.to_string()))?;
        Ok(Self { msg_type, header, blob })
    }

    pub fn header_bytes(&self) -> &[u8] {
        &self.header
    }

    pub fn header(&self) -> Value {
        serde_json::from_slice(&self.header).expect("validated at construction")
    }

    pub fn encoded_len(&self) -> usize {
        PREFIX + self.header.len() + 4 + self.blob.len()
    }
}

pub fn encode_frame(f: &ProtocolFrame) -> Result<Vec<u8>, ProtocolError> {
    let len = f.encoded_len();
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(len));
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(f.msg_type as u8);
    out.extend_from_slice(&(f.header.len() as u32).to_be_bytes());
    out.extend_from_slice(&f.header);
    out.extend_from_slice(&(f.blob.len() as u32).to_be_bytes());
    out.extend_from_slice(&f.blob);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of bytes it occupied.
    Frame(ProtocolFrame, usize),
    NeedMoreData,
}

/// Decodes the first frame in `buf`. Fixed fields are validated as soon as
/// their bytes are present, so garbage is rejected without waiting for more.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded, ProtocolError> {
    let m = buf.len().min(4);
    if buf[..m] != MAGIC[..m] {
        return Err(ProtocolError::BadMagic(buf[..m].to_vec()));
    }
    if buf.len() > 4 && buf[4] != VERSION {
        return Err(ProtocolError::UnknownVersion(buf[4]));
    }
    if buf.len() > 5 && MsgType::from_code(buf[5]).is_none() {
        return Err(ProtocolError::UnknownType(buf[5]));
    }
    if buf.len() < PREFIX {
        return Ok(Decoded::NeedMoreData);
    }
    let header_len = u32::from_be_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
    if PREFIX + header_len + 4 > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(PREFIX + header_len + 4));
    }
    let blob_at = PREFIX + header_len;
    if buf.len() < blob_at + 4 {
        return Ok(Decoded::NeedMoreData);
    }
    let blob_len = u32::from_be_bytes(buf[blob_at..blob_at + 4].try_into().expect("4 bytes")) as usize;
    let total = blob_at + 4 + blob_len;
    if total > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(total));
    }
    if buf.len() < total {
        return Ok(Decoded::NeedMoreData);
    }
    let msg_type = MsgType::from_code(buf[5]).expect("checked above");
    let frame = ProtocolFrame::from_raw(msg_type, buf[PREFIX..blob_at].to_vec(), buf[blob_at + 4..total].to_vec())?;
    Ok(Decoded::Frame(frame, total))
}

/// Decodes exactly one frame occupying all of `msg` (one transport message).
pub fn decode_message(msg: &[u8]) -> Result<ProtocolFrame, ProtocolError> {
    match decode_frame(msg)? {
        Decoded::Frame(f, n) if n == msg.len() => Ok(f),
        Decoded::Frame(_, n) => Err(ProtocolError::TrailingBytes(msg.len() - n)),
        Decoded::NeedMoreData => Err(ProtocolError::Incomplete(msg.len())),
    }
}

/// Buffers a byte stream and yields complete frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_frame(&mut self) -> Result<Option<ProtocolFrame>, ProtocolError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match decode_frame(&self.buf)? {
            Decoded::Frame(f, n) => {
                self.buf.drain(..n);
                Ok(Some(f))
            }
            Decoded::NeedMoreData => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn hello_round_trips_byte_exact() {
        let f = ProtocolFrame::from_raw(MsgType::Hello, b"{}".to_vec(), vec![]).unwrap();
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(bytes, [b"FALC".as_slice(), &[1, 0x01, 0, 0, 0, 2], b"{}", &[0, 0, 0, 0]].concat());
        assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Frame(f.clone(), bytes.len()));
        assert_eq!(encode_frame(&f).unwrap(), bytes);
    }

    #[test]
    fn truncation_needs_more_data() {
        let f = ProtocolFrame::new(MsgType::SelectAsset, &json!({"archetype": "car", "seed": 3}), vec![1, 2, 3]);
        let bytes = encode_frame(&f).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode_frame(&bytes[..cut]).unwrap(), Decoded::NeedMoreData, "cut at {cut}");
        }
    }

    #[test]
    fn malformed_prefixes_are_rejected() {
        assert!(matches!(decode_frame(b"XXXX\x01\x01"), Err(ProtocolError::BadMagic(_))));
        assert!(matches!(decode_frame(b"FALC\x02"), Err(ProtocolError::UnknownVersion(2))));
        assert!(matches!(decode_frame(b"FALC\x01\x55"), Err(ProtocolError::UnknownType(0x55))));
        let huge = [b"FALC\x01\x01".as_slice(), &0x0200_0000u32.to_be_bytes()].concat();
        assert!(matches!(decode_frame(&huge), Err(ProtocolError::Oversize(_))));
        let bad_json = [b"FALC\x01\x01".as_slice(), &[0, 0, 0, 1], b"{", &[0, 0, 0, 0]].concat();
        assert!(matches!(decode_frame(&bad_json), Err(ProtocolError::BadHeader(_))));
    }

    #[test]
    fn oversize_frames_cannot_be_encoded() {
        let f = ProtocolFrame::new(MsgType::InferRequest, &json!({}), vec![0; MAX_FRAME_BYTES]);
        assert!(matches!(encode_frame(&f), Err(ProtocolError::Oversize(_))));
    }

    #[test]
    fn stream_decoder_splits_concatenated_frames() {
        let a = ProtocolFrame::new(MsgType::Hello, &json!({}), vec![]);
        let b = ProtocolFrame::new(MsgType::InferRequest, &json!({"id": 7}), vec![9; 100]);
        let bytes = [encode_frame(&a).unwrap(), encode_frame(&b).unwrap()].concat();
        let mut d = FrameDecoder::new();
        let mut got = Vec::new();
        for chunk in bytes.chunks(7) {
            d.push(chunk);
            while let Some(f) = d.next_frame().unwrap() {
                got.push(f);
            }
        }
        assert_eq!(got, vec![a, b]);
        assert_eq!(d.buffered(), 0);
    }

    #[test]
    fn message_decoding_rejects_trailing_bytes() {
        let mut bytes = encode_frame(&ProtocolFrame::new(MsgType::Hello, &json!({}), vec![])).unwrap();
        bytes.push(0);
        assert_eq!(decode_message(&bytes), Err(ProtocolError::TrailingBytes(1)));
        assert_eq!(decode_message(&bytes[..5]), Err(ProtocolError::Incomplete(5)));
    }

    proptest! {
        #[test]
        fn round_trip(code in prop::sample::select(MsgType::ALL.to_vec()), key in "[a-z]{0,8}", n in any::<i64>(), blob in prop::collection::vec(any::<u8>(), 0..256)) {
            let f = ProtocolFrame::new(code, &json!({ key: n }), blob);
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Frame(f, bytes.len()));
        }

        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            match decode_frame(&bytes) {
                Ok(Decoded::Frame(_, n)) => prop_assert!(n <= bytes.len()),
                Ok(Decoded::NeedMoreData) | Err(_) => {}
            }
        }
    }
}
