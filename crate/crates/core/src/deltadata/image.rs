//! A minimal tagged-section image container.
//!
//! `DIMG` magic, a version byte, then sections of: 16-byte NUL-padded
//! name, u32 little-endian length, contents.

pub const IMAGE_MAGIC: &[u8; 4] = b"DIMG";
pub const IMAGE_VERSION: u8 = 1;
pub const SECTION_HEADER_LEN: usize = 20;
pub const DELTA_SECTION: &str = ".delta";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("not an image container")]
    BadMagic,
    #[error("truncated image")]
    Truncated,
    #[error("section name `{0}` is empty or longer than 16 bytes")]
    BadName(String),
    #[error("image already has a `{0}` section")]
    Duplicate(String),
    #[error("image has no `{0}` section")]
    Missing(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Image {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Image {
    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), ImageError> {
        if name.is_empty() || name.len() > 16 || name.contains('\0') {
            return Err(ImageError::BadName(name.to_string()));
        }
        if self.section(name).is_some() {
            return Err(ImageError::Duplicate(name.to_string()));
        }
        self.sections.push((name.to_string(), bytes));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(IMAGE_VERSION);
        for (name, bytes) in &self.sections {
            write_section(&mut out, name, bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < 5 || &bytes[..4] != IMAGE_MAGIC || bytes[4] != IMAGE_VERSION {
            return Err(ImageError::BadMagic);
        }
        let mut sections = Vec::new();
        let mut rest = &bytes[5..];
        while !rest.is_empty() {
            if rest.len() < SECTION_HEADER_LEN {
                return Err(ImageError::Truncated);
            }
            let name_end = rest[..16].iter().position(|&b| b == 0).unwrap_or(16);
            let name =
                String::from_utf8(rest[..name_end].to_vec()).map_err(|_| ImageError::BadName("<non-utf8>".into()))?;
            let len = u32::from_le_bytes(rest[16..20].try_into().expect("4 bytes")) as usize;
            let body = rest.get(SECTION_HEADER_LEN..SECTION_HEADER_LEN + len).ok_or(ImageError::Truncated)?;
            sections.push((name, body.to_vec()));
            rest = &rest[SECTION_HEADER_LEN + len..];
        }
        Ok(Image { sections })
    }
}

fn write_section(out: &mut Vec<u8>, name: &str, bytes: &[u8]) {
    let mut n = [0u8; 16];
    n[..name.len()].copy_from_slice(name.as_bytes());
    out.extend_from_slice(&n);
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Append a `.delta` section holding `dd_bytes`. Existing bytes are left
/// untouched.
pub fn embed(image: &[u8], dd_bytes: &[u8]) -> Result<Vec<u8>, ImageError> {
    let parsed = Image::from_bytes(image)?;
    if parsed.section(DELTA_SECTION).is_some() {
        return Err(ImageError::Duplicate(DELTA_SECTION.into()));
    }
    let mut out = image.to_vec();
    write_section(&mut out, DELTA_SECTION, dd_bytes);
    Ok(out)
}

pub fn extract(image: &[u8]) -> Result<Vec<u8>, ImageError> {
    Image::from_bytes(image)?
        .section(DELTA_SECTION)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| ImageError::Missing(DELTA_SECTION.into()))
}
