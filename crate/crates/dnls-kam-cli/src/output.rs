//! Report writers. Every float goes out with 17 significant digits so a
//! reader can round-trip it; non-finite values become `null`.

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Wraps a serde_json formatter and overrides float output.
struct Exact<F>(F);

fn write_float<W: ?Sized + Write>(w: &mut W, v: f64) -> io::Result<()> {
    // serde_json already maps non-finite floats to null before this point
    write!(w, "{v:.16e}")
}

macro_rules! forward {
    ($($name:ident($($arg:ident: $t:ty),*);)*) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $t)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl<F: Formatter> Formatter for Exact<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write_float(w, v)
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write_float(w, v as f64)
    }
    forward! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        end_object_key();
        begin_object_value();
        end_object_value();
    }
}

/// Single-line JSON.
pub fn to_json_line<T: Serialize>(v: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact(CompactFormatter));
    v.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Indented JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(v: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact(PrettyFormatter::new()));
    v.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

/// Output directory with the created path remembered.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> io::Result<Self> {
        Self::create(&self.root.join(name))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, v: &T) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, to_json_pretty(v)?)?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> io::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }
}

/// Appends one JSON object per line and flushes after each, so a run that
/// stops half way leaves a readable log.
pub struct JsonLines {
    file: io::BufWriter<fs::File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self { file: io::BufWriter::new(fs::File::create(path)?) })
    }

    pub fn push<T: Serialize>(&mut self, v: &T) -> anyhow::Result<()> {
        writeln!(self.file, "{}", to_json_line(v)?)?;
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct S {
        a: f64,
        b: Vec<f64>,
        n: u32,
    }

    #[test]
    fn floats_round_trip() {
        let v = S { a: 0.1, b: vec![f64::NAN, -1.0 / 3.0, 1e-300], n: 7 };
        let line = to_json_line(&v).unwrap();
        assert_eq!(line, r#"{"a":1.0000000000000001e-1,"b":[null,-3.3333333333333331e-1,1.0000000000000000e-300],"n":7}"#);
        let back: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
        assert_eq!(back["b"][1].as_f64(), Some(-1.0 / 3.0));
        assert!(to_json_pretty(&v).unwrap().ends_with("}\n"));
    }
}
