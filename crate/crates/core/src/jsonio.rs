//! JSON persistence with 17-significant-digit floats.
//!
//! Every `f64` is written as `{:.16e}` (17 significant digits), which parses
//! back to the identical bit pattern. Paths ending in `.gz` are gzip-compressed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::{Error, Result};

/// Wraps another formatter and overrides float output.
pub struct Sig17<F>(pub F);

macro_rules! delegate {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.$name(w)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    delegate!(
        begin_array,
        end_array,
        begin_object,
        end_object,
        end_array_value,
        end_object_value,
        begin_object_value
    );

    #[inline]
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    #[inline]
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
}

pub fn to_string<T: Serialize>(value: &T, pretty: bool) -> Result<String> {
    let mut buf = Vec::new();
    write_to(&mut buf, value, pretty)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

fn write_to<W: Write, T: Serialize>(w: W, value: &T, pretty: bool) -> Result<()> {
    if pretty {
        let mut ser = serde_json::Serializer::with_formatter(w, Sig17(PrettyFormatter::new()));
        value.serialize(&mut ser)?;
    } else {
        let mut ser = serde_json::Serializer::with_formatter(w, Sig17(CompactFormatter));
        value.serialize(&mut ser)?;
    }
    Ok(())
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes `value` to `path`, gzip-compressed when the path ends in `.gz`.
pub fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut enc = GzEncoder::new(&mut w, Compression::default());
        write_to(&mut enc, value, pretty)?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        write_to(&mut w, value, pretty)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_value(path: &Path) -> Result<serde_json::Value> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file))
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(serde_json::from_str(&text)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_value(read_value(path)?)?)
}

/// Reads the `schema_version` field and rejects anything but `expected`.
pub fn check_schema(value: &serde_json::Value, expected: u64) -> Result<()> {
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Invariant("missing schema_version".into()))?;
    if found != expected {
        return Err(Error::SchemaVersion { found, expected });
    }
    Ok(())
}
