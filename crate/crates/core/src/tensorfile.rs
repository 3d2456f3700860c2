// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-oriented text container for named `f64` tensors.
//!
//! ```text
//! format<TAB>truthx-ckpt/1
//! meta<TAB>key<TAB>value
//! tensor<TAB>name<TAB>d0,d1<TAB>v0 v1 v2 ...
//! ```
//!
//! Values are written in shortest round-trip exponent form, so
//! `read(write(t)) == t` bit for bit.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub format: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

/// Shortest round-trip decimal rendering of one value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_f64(*v));
    }
}

pub fn parse_values(s: &str, line: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|tok| {
            let v: f64 = tok.parse().map_err(|_| Error::Data {
                line,
                msg: format!("invalid number `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    line,
                    msg: format!("non-finite value `{tok}`"),
                });
            }
            Ok(v)
        })
        .collect()
}

impl TensorFile {
    pub fn new(format: impl Into<String>) -> Self {
        Self {
            format: format.into(),
            ..Default::default()
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data {
                line: 0,
                msg: format!("missing header field `{key}`"),
            })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Data {
            line: 0,
            msg: format!("invalid header field `{key}` = `{raw}`"),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data {
                line: 0,
                msg: format!("missing tensor `{name}`"),
            })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::new();
        s.push_str("format\t");
        s.push_str(&self.format);
        s.push('\n');
        for (k, v) in &self.meta {
            s.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("tensor\t{}\t{}\t", t.name, shape.join(",")));
            write_values(&mut s, &t.data);
            s.push('\n');
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Parse a container, checking the `format` line against `expected`.
    pub fn read_from<R: BufRead>(r: R, expected: &str) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let first = match lines.next() {
            Some((_, l)) => l?,
            None => {
                return Err(Error::Data {
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        };
        let found = first.strip_prefix("format\t").ok_or_else(|| Error::Data {
            line: 1,
            msg: "missing format line".into(),
        })?;
        if found != expected {
            return Err(Error::Version {
                expected: expected.into(),
                found: found.into(),
            });
        }
        let mut file = TensorFile::new(found);
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(4, '\t');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| Error::Data {
                        line: lineno,
                        msg: "meta without key".into(),
                    })?;
                    let rest: Vec<&str> = parts.collect();
                    file.meta.push((k.to_string(), rest.join("\t")));
                }
                Some("tensor") => {
                    let (name, shape, values) = match (parts.next(), parts.next(), parts.next()) {
                        (Some(n), Some(s), Some(v)) => (n, s, v),
                        _ => {
                            return Err(Error::Data {
                                line: lineno,
                                msg: "truncated tensor record".into(),
                            })
                        }
                    };
                    let shape: Vec<usize> = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| {
                                d.parse().map_err(|_| Error::Data {
                                    line: lineno,
                                    msg: format!("bad shape `{shape}`"),
                                })
                            })
                            .collect::<Result<_>>()?
                    };
                    let data = parse_values(values, lineno)?;
                    let expect: usize = shape.iter().product();
                    if expect != data.len() {
                        return Err(Error::Data {
                            line: lineno,
                            msg: format!(
                                "tensor `{name}` has {} values, shape needs {expect}",
                                data.len()
                            ),
                        });
                    }
                    file.tensors.push(NamedTensor {
                        name: name.to_string(),
                        shape,
                        data,
                    });
                }
                _ => {
                    return Err(Error::Data {
                        line: lineno,
                        msg: "unknown record".into(),
                    })
                }
            }
        }
        Ok(file)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path, expected: &str) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 0..40)) {
            let mut tf = TensorFile::new("test/1");
            tf.push_meta("seed", 7);
            tf.push_tensor("a", vec![vals.len()], vals.clone());
            let mut buf = Vec::new();
            tf.write_to(&mut buf).unwrap();
            let back = TensorFile::read_from(&buf[..], "test/1").unwrap();
            let bits: Vec<u64> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!(back.meta("seed").unwrap(), "7");
        }
    }

    #[test]
    fn version_mismatch() {
        let tf = TensorFile::new("a/1");
        let mut buf = Vec::new();
        tf.write_to(&mut buf).unwrap();
        assert!(matches!(
            TensorFile::read_from(&buf[..], "a/2"),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn bad_value_names_line() {
        let text = "format\tx/1\nmeta\tk\tv\ntensor\tw\t2\t1e0 oops\n";
        match TensorFile::read_from(text.as_bytes(), "x/1") {
            Err(Error::Data { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
