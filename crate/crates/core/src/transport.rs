//! Message envelope between the FL server and its clients, plus the
//! transports that carry it.
//!
//! Only model parameters, scaler bounds and phase markers have a payload
//! variant; there is no way to put a data row into an [`FLMessage`].
//!
//! # Wire format
//!
//! All integers big-endian.
//!
//! ```text
//! length     u32   byte count of everything after this field
//! kind       u8    1 GlobalModel, 2 ClientUpdate, 3 ScalerPass,
//!                  4 ScalerBroadcast, 5 PhaseAdvance
//! round      u32
//! sender     u16 length + UTF-8 bytes
//! payload    per kind:
//!   GlobalModel / ClientUpdate:   u64 count, u32 n, n x f64
//!   ScalerPass / ScalerBroadcast: u32 n, u8 flags (bit 0: random init),
//!                                 n x (f64 min, f64 max)
//!   PhaseAdvance:                 u8 phase (0 scaler, 1 autoencoder,
//!                                 2 classifier, 3 done)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::scaler::MinMaxScaler;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    GlobalModel = 1,
    ClientUpdate = 2,
    ScalerPass = 3,
    ScalerBroadcast = 4,
    PhaseAdvance = 5,
}

impl MessageKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MessageKind::GlobalModel,
            2 => MessageKind::ClientUpdate,
            3 => MessageKind::ScalerPass,
            4 => MessageKind::ScalerBroadcast,
            5 => MessageKind::PhaseAdvance,
            other => return Err(Error::protocol("decode", format!("unknown message kind {other}"))),
        })
    }

    /// No message kind carries client data rows. Kept as an explicit query so
    /// audits read as a check rather than an assumption.
    pub fn carries_raw_rows(self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Scaler = 0,
    Autoencoder = 1,
    Classifier = 2,
    Done = 3,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Params(ParamVector),
    Scaler(MinMaxScaler),
    Phase(Phase),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FLMessage {
    kind: MessageKind,
    pub round: u32,
    pub sender: String,
    payload: Payload,
}

impl FLMessage {
    pub fn new(kind: MessageKind, round: u32, sender: impl Into<String>, payload: Payload) -> Result<Self> {
        let ok = matches!(
            (kind, &payload),
            (MessageKind::GlobalModel | MessageKind::ClientUpdate, Payload::Params(_))
                | (MessageKind::ScalerPass | MessageKind::ScalerBroadcast, Payload::Scaler(_))
                | (MessageKind::PhaseAdvance, Payload::Phase(_))
        );
        if !ok {
            return Err(Error::protocol("envelope", format!("{kind:?} cannot carry {payload:?}")));
        }
        let sender = sender.into();
        if sender.len() > u16::MAX as usize {
            return Err(Error::protocol("envelope", "sender id too long"));
        }
        Ok(Self {
            kind,
            round,
            sender,
            payload,
        })
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    /// Number of f64 values in the payload.
    pub fn payload_values(&self) -> usize {
        match &self.payload {
            Payload::Params(p) => p.len(),
            Payload::Scaler(s) => 2 * s.width(),
            Payload::Phase(_) => 0,
        }
    }

    pub fn into_params(self, step: &str) -> Result<ParamVector> {
        match self.payload {
            Payload::Params(p) => Ok(p),
            other => Err(Error::protocol(step, format!("expected parameters, got {other:?}"))),
        }
    }

    pub fn into_scaler(self, step: &str) -> Result<MinMaxScaler> {
        match self.payload {
            Payload::Scaler(s) => Ok(s),
            other => Err(Error::protocol(step, format!("expected scaler, got {other:?}"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(16 + 8 * self.payload_values());
        body.push(self.kind as u8);
        body.extend_from_slice(&self.round.to_be_bytes());
        body.extend_from_slice(&(self.sender.len() as u16).to_be_bytes());
        body.extend_from_slice(self.sender.as_bytes());
        match &self.payload {
            Payload::Params(p) => {
                body.extend_from_slice(&p.count.to_be_bytes());
                body.extend_from_slice(&(p.len() as u32).to_be_bytes());
                for v in &p.values {
                    body.extend_from_slice(&v.to_be_bytes());
                }
            }
            Payload::Scaler(s) => {
                body.extend_from_slice(&(s.width() as u32).to_be_bytes());
                body.push(u8::from(s.initialized_randomly));
                for (lo, hi) in s.mins.iter().zip(&s.maxs) {
                    body.extend_from_slice(&lo.to_be_bytes());
                    body.extend_from_slice(&hi.to_be_bytes());
                }
            }
            Payload::Phase(p) => body.push(*p as u8),
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    /// Decodes a frame body (everything after the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: body, pos: 0 };
        let kind = MessageKind::from_byte(cur.u8()?)?;
        let round = cur.u32()?;
        let sender_len = cur.u16()? as usize;
        let sender = std::str::from_utf8(cur.take(sender_len)?)
            .map_err(|_| Error::protocol("decode", "sender id is not UTF-8"))?
            .to_string();
        let payload = match kind {
            MessageKind::GlobalModel | MessageKind::ClientUpdate => {
                let count = cur.u64()?;
                let n = cur.u32()? as usize;
                if cur.remaining() != n * 8 {
                    return Err(Error::protocol(
                        "decode",
                        format!("parameter payload declares {n} values, frame holds {} bytes", cur.remaining()),
                    ));
                }
                let values = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                Payload::Params(ParamVector::new(values, count))
            }
            MessageKind::ScalerPass | MessageKind::ScalerBroadcast => {
                let n = cur.u32()? as usize;
                let flags = cur.u8()?;
                if cur.remaining() != n * 16 {
                    return Err(Error::protocol(
                        "decode",
                        format!("scaler payload declares {n} features, frame holds {} bytes", cur.remaining()),
                    ));
                }
                let mut mins = Vec::with_capacity(n);
                let mut maxs = Vec::with_capacity(n);
                for _ in 0..n {
                    mins.push(cur.f64()?);
                    maxs.push(cur.f64()?);
                }
                Payload::Scaler(MinMaxScaler::from_bounds(mins, maxs, flags & 1 == 1)?)
            }
            MessageKind::PhaseAdvance => {
                let p = match cur.u8()? {
                    0 => Phase::Scaler,
                    1 => Phase::Autoencoder,
                    2 => Phase::Classifier,
                    3 => Phase::Done,
                    other => return Err(Error::protocol("decode", format!("unknown phase {other}"))),
                };
                Payload::Phase(p)
            }
        };
        if cur.remaining() != 0 {
            return Err(Error::protocol("decode", "trailing bytes after payload"));
        }
        FLMessage::new(kind, round, sender, payload)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::protocol("decode", "truncated frame"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &FLMessage) -> std::io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<FLMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|e| Error::protocol("read frame", e.to_string()))?;
    let len = u32::from_be_bytes(len) as usize;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|e| Error::protocol("read frame", e.to_string()))?;
    FLMessage::decode(&body)
}

/// Carries one message to `recipient` and returns it as the recipient
/// received it.
pub trait Transport: Send {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage>;
}

/// Direct hand-off inside one process.
#[derive(Debug, Default)]
pub struct InProcess;

impl Transport for InProcess {
    fn transmit(&mut self, _recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        Ok(msg)
    }
}

/// Sends every message through the framed byte protocol over a connected
/// pair of local sockets and decodes it on the far side.
#[cfg(unix)]
pub struct SocketLoopback {
    tx: std::os::unix::net::UnixStream,
    rx: std::os::unix::net::UnixStream,
}

#[cfg(unix)]
impl SocketLoopback {
    pub fn new() -> std::io::Result<Self> {
        let (tx, rx) = std::os::unix::net::UnixStream::pair()?;
        Ok(Self { tx, rx })
    }
}

#[cfg(unix)]
impl Transport for SocketLoopback {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        let frame = msg.encode();
        let tx = &mut self.tx;
        let rx = &mut self.rx;
        // writer runs beside the reader so frames larger than the socket
        // buffer cannot deadlock
        std::thread::scope(|s| {
            let writer = s.spawn(move || tx.write_all(&frame).and_then(|_| tx.flush()));
            let got = read_frame(rx);
            let wrote = writer.join().expect("socket writer panicked");
            wrote.map_err(|e| Error::protocol(format!("send to {recipient}"), e.to_string()))?;
            got
        })
    }
}

/// One audited message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: String,
    pub recipient: String,
    pub payload_values: usize,
}

/// Wraps a transport and keeps a record of every message it carried.
pub struct Recorder<T> {
    inner: T,
    pub log: Vec<MessageRecord>,
}

impl<T> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            log: Vec::new(),
        }
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        self.log.push(MessageRecord {
            kind: msg.kind(),
            round: msg.round,
            sender: msg.sender.clone(),
            recipient: recipient.to_string(),
            payload_values: msg.payload_values(),
        });
        self.inner.transmit(recipient, msg)
    }
}

/// Simulates an unreachable client: delivery to `recipient` fails.
pub struct Unreachable<T> {
    inner: T,
    recipient: String,
}

impl<T> Unreachable<T> {
    pub fn new(inner: T, recipient: impl Into<String>) -> Self {
        Self {
            inner,
            recipient: recipient.into(),
        }
    }
}

impl<T: Transport> Transport for Unreachable<T> {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        if recipient == self.recipient {
            return Err(Error::protocol(
                format!("{:?} round {} to {recipient}", msg.kind(), msg.round),
                "client unreachable",
            ));
        }
        self.inner.transmit(recipient, msg)
    }
}

/// Shared audit log usable while the transport itself is owned elsewhere.
pub type SharedLog = std::sync::Arc<std::sync::Mutex<Vec<MessageRecord>>>;

/// Like [`Recorder`] but writes into a shared log handle.
pub struct SharedRecorder<T> {
    inner: T,
    log: SharedLog,
}

impl<T> SharedRecorder<T> {
    pub fn new(inner: T) -> (Self, SharedLog) {
        let log = SharedLog::default();
        (
            Self {
                inner,
                log: log.clone(),
            },
            log,
        )
    }
}

impl<T: Transport> Transport for SharedRecorder<T> {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        self.log.lock().unwrap().push(MessageRecord {
            kind: msg.kind(),
            round: msg.round,
            sender: msg.sender.clone(),
            recipient: recipient.to_string(),
            payload_values: msg.payload_values(),
        });
        self.inner.transmit(recipient, msg)
    }
}

impl Transport for Box<dyn Transport> {
    fn transmit(&mut self, recipient: &str, msg: FLMessage) -> Result<FLMessage> {
        (**self).transmit(recipient, msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params_msg(values: Vec<f64>, count: u64) -> FLMessage {
        FLMessage::new(MessageKind::ClientUpdate, 7, "client-2", Payload::Params(ParamVector::new(values, count))).unwrap()
    }

    #[test]
    fn frame_layout() {
        let msg = params_msg(vec![1.5], 3);
        let f = msg.encode();
        // len(4) kind(1) round(4) sender(2+8) count(8) n(4) value(8)
        assert_eq!(f.len(), 4 + 1 + 4 + 2 + 8 + 8 + 4 + 8);
        assert_eq!(u32::from_be_bytes(f[0..4].try_into().unwrap()) as usize, f.len() - 4);
        assert_eq!(f[4], 2);
        assert_eq!(u32::from_be_bytes(f[5..9].try_into().unwrap()), 7);
        assert_eq!(&f[9..11], &[0, 8]);
        assert_eq!(&f[11..19], b"client-2");
        assert_eq!(f64::from_be_bytes(f[f.len() - 8..].try_into().unwrap()), 1.5);
    }

    #[test]
    fn kind_payload_mismatch_rejected() {
        let err = FLMessage::new(MessageKind::ScalerPass, 0, "s", Payload::Phase(Phase::Done));
        assert!(matches!(err, Err(Error::Protocol { .. })));
    }

    #[test]
    fn truncated_and_padded_frames_rejected() {
        let f = params_msg(vec![1.0, 2.0], 1).encode();
        assert!(FLMessage::decode(&f[4..f.len() - 1]).is_err());
        let mut padded = f[4..].to_vec();
        padded.push(0);
        assert!(FLMessage::decode(&padded).is_err());
    }

    #[test]
    fn scaler_and_phase_round_trip() {
        let s = MinMaxScaler::from_bounds(vec![-1.0, 0.0], vec![2.0, 0.0], true).unwrap();
        let m = FLMessage::new(MessageKind::ScalerBroadcast, 0, "server", Payload::Scaler(s)).unwrap();
        assert_eq!(FLMessage::decode(&m.encode()[4..]).unwrap(), m);
        let p = FLMessage::new(MessageKind::PhaseAdvance, 3, "server", Payload::Phase(Phase::Classifier)).unwrap();
        assert_eq!(FLMessage::decode(&p.encode()[4..]).unwrap(), p);
    }

    #[cfg(unix)]
    #[test]
    fn socket_loopback_carries_large_frames() {
        let mut t = SocketLoopback::new().unwrap();
        let msg = params_msg((0..100_000).map(|i| i as f64 * 0.25).collect(), 9);
        let got = t.transmit("c", msg.clone()).unwrap();
        assert_eq!(got, msg);
    }

    #[test]
    fn recorder_and_fault_injection() {
        let mut t = Recorder::new(Unreachable::new(InProcess, "c3"));
        assert!(t.transmit("c1", params_msg(vec![0.0; 4], 1)).is_ok());
        let err = t.transmit("c3", params_msg(vec![0.0; 4], 1)).unwrap_err();
        assert!(err.to_string().contains("c3"));
        assert_eq!(t.log.len(), 2);
        assert_eq!(t.log[0].payload_values, 4);
    }

    proptest! {
        #[test]
        fn params_frames_round_trip(values in prop::collection::vec(any::<f64>(), 0..64), count in any::<u64>(), round in any::<u32>()) {
            let msg = FLMessage::new(MessageKind::GlobalModel, round, "server", Payload::Params(ParamVector::new(values, count))).unwrap();
            let mut buf = Vec::new();
            write_frame(&mut buf, &msg).unwrap();
            let back = read_frame(&mut &buf[..]).unwrap();
            // compare bit patterns so NaN payloads count as equal
            let bits = |m: &FLMessage| match m.payload() {
                Payload::Params(p) => p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                _ => unreachable!(),
            };
            prop_assert_eq!(bits(&back), bits(&msg));
            prop_assert_eq!(back.round, round);
        }
    }
}
