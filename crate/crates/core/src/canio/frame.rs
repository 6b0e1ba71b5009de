use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arbitration-id width of a stream; differs by manufacturer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AddressWidth {
    /// 11-bit identifiers, 0..=0x7FF.
    #[default]
    Standard,
    /// 29-bit identifiers, 0..=0x1FFF_FFFF.
    Extended,
}

impl AddressWidth {
    pub fn bits(self) -> u32 {
        match self {
            Self::Standard => 11,
            Self::Extended => 29,
        }
    }

    pub fn max_id(self) -> u32 {
        (1u32 << self.bits()) - 1
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            11 => Some(Self::Standard),
            29 => Some(Self::Extended),
            _ => None,
        }
    }
}

impl Serialize for AddressWidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.bits())
    }
}

impl<'de> Deserialize<'de> for AddressWidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bits = u32::deserialize(d)?;
        Self::from_bits(bits)
            .ok_or_else(|| serde::de::Error::custom(format!("address width must be 11 or 29, got {bits}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Attack,
    #[default]
    Unlabeled,
}

impl Label {
    /// Per-position label used by windowing: 1 for injected frames.
    pub fn is_attack(self) -> bool {
        self == Label::Attack
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("id {id:#x} exceeds {}-bit address space", .width.bits())]
    IdOutOfRange { id: u32, width: AddressWidth },
    #[error("payload of {0} bytes exceeds 8")]
    PayloadTooLong(usize),
    #[error("timestamp {0} is negative or not finite")]
    BadTimestamp(f64),
}

/// One timestamped classic CAN data frame.
///
/// The payload length is the DLC, so the two can never disagree.
#[derive(Clone, Copy, PartialEq)]
pub struct CanFrame {
    timestamp: f64,
    can_id: u32,
    dlc: u8,
    data: [u8; 8],
    pub label: Label,
}

impl CanFrame {
    pub fn new(
        timestamp: f64,
        can_id: u32,
        payload: &[u8],
        label: Label,
        width: AddressWidth,
    ) -> Result<Self, FrameError> {
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(FrameError::BadTimestamp(timestamp));
        }
        if can_id > width.max_id() {
            return Err(FrameError::IdOutOfRange { id: can_id, width });
        }
        if payload.len() > 8 {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            timestamp,
            can_id,
            dlc: payload.len() as u8,
            data,
            label,
        })
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn can_id(&self) -> u32 {
        self.can_id
    }

    pub fn dlc(&self) -> usize {
        self.dlc as usize
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }
}

impl fmt::Debug for CanFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CanFrame({:.6} {:#05x} [{}] {:02X?} {:?})",
            self.timestamp,
            self.can_id,
            self.dlc,
            self.payload(),
            self.label
        )
    }
}
