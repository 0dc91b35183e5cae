//! Line-delimited JSON records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub struct JsonLines<W: Write> {
    out: W,
}

impl JsonLines<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines { out: BufWriter::new(File::create(path)?) })
    }
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        JsonLines { out }
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::invalid(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_per_line() {
        let mut w = JsonLines::new(Vec::new());
        w.write(&serde_json::json!({"a": 1})).unwrap();
        w.write(&[1.5, 2.0]).unwrap();
        assert_eq!(String::from_utf8(w.into_inner()).unwrap(), "{\"a\":1}\n[1.5,2.0]\n");
    }
}
