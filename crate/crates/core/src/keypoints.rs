use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of face keypoints in the rigid model.
pub const NUM_KEYPOINTS: usize = 9;

/// The nine model keypoints plus the face-box center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointType {
    EyeLeft,
    EyeRight,
    NoseLeft,
    NoseRight,
    MouthLeft,
    MouthRight,
    EarLeft,
    EarRight,
    Chin,
    FaceCenter,
}

impl KeypointType {
    /// Model keypoints in column order of the shape matrix.
    pub const FACE: [KeypointType; NUM_KEYPOINTS] = [
        KeypointType::EyeLeft,
        KeypointType::EyeRight,
        KeypointType::NoseLeft,
        KeypointType::NoseRight,
        KeypointType::MouthLeft,
        KeypointType::MouthRight,
        KeypointType::EarLeft,
        KeypointType::EarRight,
        KeypointType::Chin,
    ];

    pub const ALL: [KeypointType; NUM_KEYPOINTS + 1] = [
        KeypointType::EyeLeft,
        KeypointType::EyeRight,
        KeypointType::NoseLeft,
        KeypointType::NoseRight,
        KeypointType::MouthLeft,
        KeypointType::MouthRight,
        KeypointType::EarLeft,
        KeypointType::EarRight,
        KeypointType::Chin,
        KeypointType::FaceCenter,
    ];

    /// Position in [`KeypointType::ALL`]; model keypoints share their
    /// column index in the shape matrix.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn model_index(self) -> Option<usize> {
        (self != KeypointType::FaceCenter).then_some(self as usize)
    }

    pub fn name(self) -> &'static str {
        match self {
            KeypointType::EyeLeft => "eye_left",
            KeypointType::EyeRight => "eye_right",
            KeypointType::NoseLeft => "nose_left",
            KeypointType::NoseRight => "nose_right",
            KeypointType::MouthLeft => "mouth_left",
            KeypointType::MouthRight => "mouth_right",
            KeypointType::EarLeft => "ear_left",
            KeypointType::EarRight => "ear_right",
            KeypointType::Chin => "chin",
            KeypointType::FaceCenter => "face_center",
        }
    }
}

impl fmt::Display for KeypointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KeypointType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        KeypointType::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown keypoint type `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in KeypointType::ALL {
            assert_eq!(k.name().parse::<KeypointType>().unwrap(), k);
            assert_eq!(KeypointType::ALL[k.index()], k);
        }
        assert!("nostril".parse::<KeypointType>().is_err());
        assert_eq!(KeypointType::FaceCenter.model_index(), None);
        assert_eq!(KeypointType::Chin.model_index(), Some(8));
    }
}
