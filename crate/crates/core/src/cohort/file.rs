//! Binary cohort/shard file.
//!
//! ```text
//! magic "COHT" | version u16 | subjects u32 | slices u32 | height u32 | width u32
//! subject table: (id u32, profile u32, role u8) × subjects
//! images: f32 × subjects·slices·height·width
//! masks:  u8  × subjects·slices·height·width
//! ```
//! All integers and floats are little-endian; images and masks are stored
//! subject-major, then slice, then row-major pixels.

use std::io::{Read, Write};

use super::{InstitutionShard, SegSample, Subject};
use crate::error::{Error, Result};

pub const COHORT_MAGIC: [u8; 4] = *b"COHT";
pub const COHORT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SubjectRole {
    Train = 0,
    Validation = 1,
    Holdout = 2,
    Unassigned = 3,
}

impl SubjectRole {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => SubjectRole::Train,
            1 => SubjectRole::Validation,
            2 => SubjectRole::Holdout,
            3 => SubjectRole::Unassigned,
            other => return Err(Error::Protocol(format!("unknown subject role {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortFile {
    pub height: usize,
    pub width: usize,
    pub slices_per_subject: usize,
    pub subjects: Vec<(Subject, SubjectRole)>,
}

impl CohortFile {
    pub fn from_subjects(subjects: &[Subject], role: SubjectRole) -> Result<Self> {
        let first = subjects
            .first()
            .and_then(|s| s.slices.first())
            .ok_or_else(|| Error::precondition("cannot write an empty cohort"))?;
        Ok(Self {
            height: first.height,
            width: first.width,
            slices_per_subject: subjects[0].slices.len(),
            subjects: subjects.iter().cloned().map(|s| (s, role)).collect(),
        })
    }

    pub fn from_shard(shard: &InstitutionShard) -> Result<Self> {
        let mut file = Self::from_subjects(&shard.train, SubjectRole::Train)?;
        file.subjects.extend(
            shard
                .val
                .iter()
                .cloned()
                .map(|s| (s, SubjectRole::Validation)),
        );
        Ok(file)
    }

    /// Rebuilds a shard from the train/validation roles.
    pub fn into_shard(self, institution_id: usize) -> Result<InstitutionShard> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (s, role) in self.subjects {
            match role {
                SubjectRole::Train => train.push(s),
                SubjectRole::Validation => val.push(s),
                other => {
                    return Err(Error::config(format!(
                        "subject {} has role {other:?}; a shard file holds only train/validation subjects",
                        s.id
                    )))
                }
            }
        }
        Ok(InstitutionShard {
            institution_id,
            train,
            val,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (h, w, sl) = (self.height, self.width, self.slices_per_subject);
        for (s, _) in &self.subjects {
            if s.slices.len() != sl || s.slices.iter().any(|x| x.height != h || x.width != w) {
                return Err(Error::shape(format!(
                    "subject {} does not match cohort dims {sl}x{h}x{w}",
                    s.id
                )));
            }
        }
        let pixels = self.subjects.len() * sl * h * w;
        let mut out = Vec::with_capacity(22 + self.subjects.len() * 9 + pixels * 5);
        out.extend_from_slice(&COHORT_MAGIC);
        out.extend_from_slice(&COHORT_VERSION.to_le_bytes());
        for v in [self.subjects.len(), sl, h, w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (s, role) in &self.subjects {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&s.profile_id.to_le_bytes());
            out.push(*role as u8);
        }
        for (s, _) in &self.subjects {
            for slice in &s.slices {
                for &v in &slice.image {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for (s, _) in &self.subjects {
            for slice in &s.slices {
                out.extend_from_slice(&slice.mask);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != COHORT_MAGIC {
            return Err(Error::Protocol("not a cohort file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != COHORT_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported cohort file version {version}"
            )));
        }
        let n = cur.u32()? as usize;
        let sl = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        let plane = h
            .checked_mul(w)
            .ok_or_else(|| Error::Protocol("image dims overflow".into()))?;
        let expected = n
            .checked_mul(9)
            .and_then(|t| {
                n.checked_mul(sl)?
                    .checked_mul(plane)?
                    .checked_mul(5)?
                    .checked_add(t)
            })
            .ok_or_else(|| Error::Protocol("cohort size overflow".into()))?;
        if bytes.len() - cur.pos != expected {
            return Err(Error::Protocol(format!(
                "cohort body is {} bytes, header implies {expected}",
                bytes.len() - cur.pos
            )));
        }
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let id = cur.u32()?;
            let profile = cur.u32()?;
            let role = SubjectRole::from_byte(cur.take(1)?[0])?;
            table.push((id, profile, role));
        }
        let mut subjects: Vec<(Subject, SubjectRole)> = table
            .into_iter()
            .map(|(id, profile_id, role)| {
                (
                    Subject {
                        id,
                        profile_id,
                        slices: Vec::with_capacity(sl),
                    },
                    role,
                )
            })
            .collect();
        for (s, _) in &mut subjects {
            for _ in 0..sl {
                let raw = cur.take(plane * 4)?;
                let image = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                s.slices.push(SegSample {
                    height: h,
                    width: w,
                    image,
                    mask: Vec::new(),
                });
            }
        }
        for (s, _) in &mut subjects {
            for slice in &mut s.slices {
                let m = cur.take(plane)?;
                if let Some(bad) = m.iter().find(|&&b| b > 1) {
                    return Err(Error::Protocol(format!("mask byte {bad} is not binary")));
                }
                slice.mask = m.to_vec();
            }
        }
        Ok(Self {
            height: h,
            width: w,
            slices_per_subject: sl,
            subjects,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Protocol("cohort file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_cohort_file(path: &std::path::Path, file: &CohortFile) -> Result<()> {
    let bytes = file.encode()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_cohort_file(path: &std::path::Path) -> Result<CohortFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    CohortFile::decode(&bytes)
}
