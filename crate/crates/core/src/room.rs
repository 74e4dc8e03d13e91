use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    Kitchen,
    Bedroom,
    LivingRoom,
}

impl RoomType {
    pub const ALL: [RoomType; 3] = [RoomType::Kitchen, RoomType::Bedroom, RoomType::LivingRoom];

    pub fn as_str(self) -> &'static str {
        match self {
            RoomType::Kitchen => "kitchen",
            RoomType::Bedroom => "bedroom",
            RoomType::LivingRoom => "living_room",
        }
    }

    /// Single-letter code used in report tables.
    pub fn code(self) -> &'static str {
        match self {
            RoomType::Kitchen => "K",
            RoomType::Bedroom => "B",
            RoomType::LivingRoom => "L",
        }
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoomType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kitchen" | "k" => Ok(RoomType::Kitchen),
            "bedroom" | "b" => Ok(RoomType::Bedroom),
            "living_room" | "livingroom" | "living-room" | "l" => Ok(RoomType::LivingRoom),
            other => Err(format!("unknown room type {other:?} (expected kitchen, bedroom or living_room)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_and_codes() {
        for room in RoomType::ALL {
            assert_eq!(room.as_str().parse::<RoomType>().unwrap(), room);
            assert_eq!(room.code().parse::<RoomType>().unwrap(), room);
        }
        assert!("garage".parse::<RoomType>().is_err());
    }
}
