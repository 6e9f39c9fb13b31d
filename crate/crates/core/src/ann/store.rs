use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Reader, Writer, MAX_ELEMS};
use crate::error::{Error, Result};
use crate::vectors::{read_vector, write_vector, Space, SpaceKind, Vector};

const MAGIC: &[u8; 4] = b"HRVS";
const VERSION: u32 = 1;

/// A space plus vectors addressed by internal id.
///
/// File layout (little-endian): magic `HRVS`, u32 version, u8 space kind,
/// u64 count, then one vector payload per id.
#[derive(Clone, Debug)]
pub struct VectorStore {
    space: Space,
    vectors: Vec<Vector>,
}

impl VectorStore {
    pub fn new(space: Space) -> Self {
        VectorStore { space, vectors: Vec::new() }
    }

    pub fn from_vectors(space: Space, vectors: Vec<Vector>) -> Result<Self> {
        let mut store = VectorStore::new(space);
        for v in vectors {
            store.push(v)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, v: Vector) -> Result<u32> {
        match self.vectors.first() {
            Some(first) => self.space.conforms(&v, first)?,
            None => self.space.accepts(&v)?,
        }
        let id = u32::try_from(self.vectors.len()).map_err(|_| Error::invalid("too many vectors"))?;
        self.vectors.push(v);
        Ok(id)
    }

    pub fn check_query(&self, q: &Vector) -> Result<()> {
        match self.vectors.first() {
            Some(first) => self.space.conforms(q, first),
            None => self.space.accepts(q),
        }
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: u32) -> &Vector {
        &self.vectors[id as usize]
    }

    pub fn vectors(&self) -> &[Vector] {
        &self.vectors
    }

    pub(crate) fn write_payload<W: Write>(&self, w: &mut Writer<W>) -> Result<()> {
        w.u8(self.space.kind().code())?;
        w.len(self.vectors.len())?;
        self.vectors.iter().try_for_each(|v| write_vector(w, v))
    }

    pub(crate) fn read_payload<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        let space = Space::new(SpaceKind::from_code(r.u8()?)?);
        let n = r.len(MAX_ELEMS)?;
        let mut store = VectorStore::new(space);
        for _ in 0..n {
            let v = read_vector(r)?;
            store.push(v).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.header(MAGIC, VERSION)?;
        self.write_payload(&mut w)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.header(MAGIC, VERSION)?;
        let store = Self::read_payload(&mut r)?;
        r.expect_end()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
