//! Fixed 64-byte message header and the frames that carry it.
//!
//! See `WIRE.md` at the crate root for the byte layout.

use hrt_device::DeviceType;

use crate::error::{DistError, Result};

pub const HEADER_LEN: usize = 64;
pub const MAGIC: [u8; 4] = *b"HRTM";
pub const VERSION: u8 = 1;
/// Header plus payload must fit in this many bytes to travel inline.
pub const INLINE_LIMIT: usize = 512;
pub const MAX_INLINE_PAYLOAD: u64 = (INLINE_LIMIT - HEADER_LEN) as u64;

const FLAG_INLINE: u8 = 0b0000_0001;
const FLAG_META: u8 = 0b0000_0010;
const DEVICE_SHIFT: u8 = 2;
const DEVICE_MASK: u8 = 0b0000_1100;
const KNOWN_FLAGS: u8 = FLAG_INLINE | FLAG_META | DEVICE_MASK;

/// Whether a payload of `payload` bytes travels inside the header message.
pub fn fits_inline(payload: u64) -> bool {
    payload <= MAX_INLINE_PAYLOAD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    Handler = 0,
    HandlerHeteroMeta = 1,
    PutMeta = 2,
    GetReq = 3,
    Ack = 4,
}

impl MsgKind {
    pub const ALL: [MsgKind; 5] = [
        MsgKind::Handler,
        MsgKind::HandlerHeteroMeta,
        MsgKind::PutMeta,
        MsgKind::GetReq,
        MsgKind::Ack,
    ];

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

/// Shape of a transported object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeteroMeta {
    /// Encoded in one byte on the wire.
    pub element_size: u32,
    /// Unused trailing extents are zero.
    pub dims: [u64; 3],
    pub source_device_type: DeviceType,
}

impl HeteroMeta {
    pub fn new(element_size: u64, dims: &[u64], source_device_type: DeviceType) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || element_size == 0 || element_size > u8::MAX as u64 {
            return Err(DistError::Wire(format!(
                "cannot describe shape {dims:?} with element size {element_size}"
            )));
        }
        let mut d = [0u64; 3];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            element_size: element_size as u32,
            dims: d,
            source_device_type,
        })
    }

    pub fn extents(&self) -> Vec<u64> {
        self.dims.iter().copied().take_while(|&d| d != 0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub kind: MsgKind,
    pub handler_id: u32,
    pub target_rank: u32,
    pub target_index: u64,
    pub payload_size: u64,
    pub inline: bool,
    pub meta: Option<HeteroMeta>,
    pub correlation_id: u64,
}

impl MessageHeader {
    pub fn new(kind: MsgKind, target_rank: u32, target_index: u64, handler_id: u32) -> Self {
        Self {
            kind,
            handler_id,
            target_rank,
            target_index,
            payload_size: 0,
            inline: true,
            meta: None,
            correlation_id: 0,
        }
    }

    /// Sets the payload size and picks inline delivery when it fits.
    pub fn with_payload(mut self, size: u64) -> Self {
        self.payload_size = size;
        self.inline = fits_inline(size);
        self
    }

    pub fn encode(&self) -> Result<[u8; HEADER_LEN]> {
        if self.inline && !fits_inline(self.payload_size) {
            return Err(DistError::Wire(format!(
                "{} byte payload cannot be inline",
                self.payload_size
            )));
        }
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = self.kind as u8;
        let mut flags = 0;
        if self.inline {
            flags |= FLAG_INLINE;
        }
        if let Some(m) = &self.meta {
            if m.element_size > u8::MAX as u32 {
                return Err(DistError::Wire(format!("element size {} too large", m.element_size)));
            }
            flags |= FLAG_META | (m.source_device_type.wire_code() << DEVICE_SHIFT);
            b[7] = m.element_size as u8;
            for (i, d) in m.dims.iter().enumerate() {
                b[40 + i * 8..48 + i * 8].copy_from_slice(&d.to_le_bytes());
            }
        }
        b[6] = flags;
        b[8..12].copy_from_slice(&self.handler_id.to_le_bytes());
        b[12..16].copy_from_slice(&self.target_rank.to_le_bytes());
        b[16..24].copy_from_slice(&self.target_index.to_le_bytes());
        b[24..32].copy_from_slice(&self.payload_size.to_le_bytes());
        b[32..40].copy_from_slice(&self.correlation_id.to_le_bytes());
        Ok(b)
    }

    /// Strict decoding: every byte pattern accepted here re-encodes to itself.
    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(DistError::Wire(format!("short header: {} bytes", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(DistError::Wire("bad magic".into()));
        }
        if b[4] != VERSION {
            return Err(DistError::Wire(format!("unsupported version {}", b[4])));
        }
        let kind = MsgKind::from_u8(b[5]).ok_or_else(|| DistError::Wire(format!("unknown kind {}", b[5])))?;
        let flags = b[6];
        if flags & !KNOWN_FLAGS != 0 {
            return Err(DistError::Wire(format!("unknown flags {flags:#04x}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let dims = [u64_at(40), u64_at(48), u64_at(56)];
        let meta = if flags & FLAG_META != 0 {
            let code = (flags & DEVICE_MASK) >> DEVICE_SHIFT;
            let source_device_type = DeviceType::from_wire_code(code)
                .ok_or_else(|| DistError::Wire(format!("unknown device type {code}")))?;
            Some(HeteroMeta {
                element_size: b[7] as u32,
                dims,
                source_device_type,
            })
        } else {
            if flags & DEVICE_MASK != 0 || b[7] != 0 || dims != [0; 3] {
                return Err(DistError::Wire("shape fields set without the meta flag".into()));
            }
            None
        };
        let h = Self {
            kind,
            handler_id: u32_at(8),
            target_rank: u32_at(12),
            target_index: u64_at(16),
            payload_size: u64_at(24),
            inline: flags & FLAG_INLINE != 0,
            meta,
            correlation_id: u64_at(32),
        };
        if h.inline && !fits_inline(h.payload_size) {
            return Err(DistError::Wire("inline flag on an oversized payload".into()));
        }
        Ok(h)
    }
}

/// Unit of delivery on a transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// Encoded header, followed by the payload when it is inline.
    Header(Vec<u8>),
    /// Out-of-line payload for the header with the same correlation id.
    Data { correlation_id: u64, bytes: Vec<u8> },
}

const TAG_HEADER: u8 = 0;
const TAG_DATA: u8 = 1;

impl Frame {
    pub fn len(&self) -> usize {
        match self {
            Frame::Header(b) => b.len(),
            Frame::Data { bytes, .. } => 8 + bytes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stream encoding: tag byte, body length as u64, body.
    pub fn write_to(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        match self {
            Frame::Header(b) => {
                out.write_all(&[TAG_HEADER])?;
                out.write_all(&(b.len() as u64).to_le_bytes())?;
                out.write_all(b)
            }
            Frame::Data { correlation_id, bytes } => {
                out.write_all(&[TAG_DATA])?;
                out.write_all(&(bytes.len() as u64 + 8).to_le_bytes())?;
                out.write_all(&correlation_id.to_le_bytes())?;
                out.write_all(bytes)
            }
        }
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream.
    pub fn read_from(input: &mut impl std::io::Read) -> std::io::Result<Option<Frame>> {
        let mut tag = [0u8; 1];
        match input.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        match tag[0] {
            TAG_HEADER => {
                let mut b = vec![0u8; len];
                input.read_exact(&mut b)?;
                Ok(Some(Frame::Header(b)))
            }
            TAG_DATA => {
                if len < 8 {
                    return Err(bad("data frame shorter than its correlation id"));
                }
                let mut c = [0u8; 8];
                input.read_exact(&mut c)?;
                let mut bytes = vec![0u8; len - 8];
                input.read_exact(&mut bytes)?;
                Ok(Some(Frame::Data {
                    correlation_id: u64::from_le_bytes(c),
                    bytes,
                }))
            }
            t => Err(bad(&format!("unknown frame tag {t}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_at_512_total_bytes() {
        assert!(fits_inline(447));
        assert!(fits_inline(448));
        assert!(!fits_inline(449));
        let h = MessageHeader::new(MsgKind::Handler, 1, 2, 3).with_payload(448);
        assert!(h.inline);
        assert!(!h.with_payload(449).inline);
    }

    #[test]
    fn rejects_garbage() {
        let h = MessageHeader::new(MsgKind::Ack, 0, 0, 0);
        let good = h.encode().unwrap();
        let mut b = good;
        b[0] = b'X';
        assert!(MessageHeader::decode(&b).is_err());
        let mut b = good;
        b[5] = 9;
        assert!(MessageHeader::decode(&b).is_err());
        let mut b = good;
        b[6] |= 0x80;
        assert!(MessageHeader::decode(&b).is_err());
        let mut b = good;
        b[41] = 1;
        assert!(MessageHeader::decode(&b).is_err());
        assert!(MessageHeader::decode(&good[..10]).is_err());
    }

    #[test]
    fn frame_stream_round_trip() {
        let frames = vec![
            Frame::Header(vec![1, 2, 3]),
            Frame::Data {
                correlation_id: 77,
                bytes: vec![9; 1000],
            },
            Frame::Data {
                correlation_id: 1,
                bytes: vec![],
            },
        ];
        let mut buf = Vec::new();
        for f in &frames {
            f.write_to(&mut buf).unwrap();
        }
        let mut cur = std::io::Cursor::new(buf);
        let mut back = Vec::new();
        while let Some(f) = Frame::read_from(&mut cur).unwrap() {
            back.push(f);
        }
        assert_eq!(back, frames);
    }
}
