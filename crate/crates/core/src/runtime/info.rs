//! String key/value hints.

use crate::error::{Error, Result};

/// An insertion-ordered set of string hints.
///
/// Binary values are stored as lowercase hex, two digits per byte, in memory
/// byte order (so a native integer encodes in the host's endianness).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Info {
    entries: Vec<(String, String)>,
}

impl Info {
    pub fn new() -> Info {
        Info::default()
    }

    /// Stores `value` under `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::arg("info key must not be empty"));
        }
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    /// Stores a binary value hex-encoded.
    pub fn set_hex(&mut self, key: &str, value: &[u8]) -> Result<()> {
        self.set(key, &hex::encode(value))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Decodes a value written by [`Info::set_hex`].
    pub fn get_hex(&self, key: &str) -> Result<Option<Vec<u8>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => hex::decode(v)
                .map(Some)
                .map_err(|e| Error::arg(format!("info value for {key:?} is not hex: {e}"))),
        }
    }

    pub fn delete(&mut self, key: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|(k, _)| k != key);
        before != self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_overwrite() {
        let mut i = Info::new();
        i.set("type", "devstream").unwrap();
        assert_eq!(i.get("type"), Some("devstream"));
        i.set("type", "other").unwrap();
        assert_eq!((i.get("type"), i.len()), (Some("other"), 1));
        assert!(matches!(i.set("", "x"), Err(Error::Arg(_))));
    }

    #[test]
    fn hex_encoding() {
        let mut i = Info::new();
        i.set_hex("a", &[0xde, 0xad]).unwrap();
        i.set_hex("b", &[]).unwrap();
        i.set_hex("c", &[0x00, 0x0f]).unwrap();
        assert_eq!(
            (i.get("a"), i.get("b"), i.get("c")),
            (Some("dead"), Some(""), Some("000f"))
        );
        assert_eq!(i.get_hex("c").unwrap(), Some(vec![0, 15]));
        i.set("d", "xyz").unwrap();
        assert!(i.get_hex("d").is_err());
    }
}
