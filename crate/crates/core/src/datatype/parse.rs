//! Text form of datatype constructors, used by the `type-dump` tool.
//!
//! ```text
//! type  := basic | ctor '(' arg (',' arg)* ')'
//! basic := byte | char | int32 | int64 | float | double
//! arg   := int | '[' int,* ']' | '[' type,* ']' | type
//! ```
//!
//! Every constructed sub-expression is committed as it is built.

use super::{Datatype, Order, BYTE, CHAR, DOUBLE, FLOAT, INT32, INT64};
use crate::error::{Error, Result};

enum Arg {
    Int(i64),
    Ints(Vec<i64>),
    Types(Vec<Datatype>),
    Type(Datatype),
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

/// Parses an expression such as `vector(3,2,4,int32)` into a committed type.
pub fn parse_type_expr(src: &str) -> Result<Datatype> {
    let mut p = Parser { src, pos: 0 };
    let ty = p.ty()?;
    p.skip_ws();
    if p.pos != src.len() {
        return Err(p.error("trailing input"));
    }
    Ok(ty)
}

impl Parser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::arg(format!("type expression: {what} at column {}", self.pos + 1))
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{c}'")))
        }
    }

    fn ident(&mut self) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        let len = self.src[start..]
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(self.src.len() - start);
        if len == 0 {
            return Err(self.error("expected a name"));
        }
        self.pos += len;
        Ok(&self.src[start..start + len])
    }

    fn int(&mut self) -> Result<i64> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let sign = usize::from(rest.starts_with('-'));
        let digits = rest[sign..]
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(rest.len() - sign);
        if digits == 0 {
            return Err(self.error("expected an integer"));
        }
        self.pos += sign + digits;
        self.src[start..self.pos]
            .parse()
            .map_err(|_| self.error("integer out of range"))
    }

    fn starts_int(&mut self) -> bool {
        matches!(self.peek(), Some(c) if c == '-' || c.is_ascii_digit())
    }

    fn arg(&mut self) -> Result<Arg> {
        if self.peek() == Some('[') {
            self.pos += 1;
            if self.peek() == Some(']') {
                self.pos += 1;
                return Ok(Arg::Ints(Vec::new()));
            }
            let arg = if self.starts_int() {
                let mut v = vec![self.int()?];
                while self.peek() == Some(',') {
                    self.pos += 1;
                    v.push(self.int()?);
                }
                Arg::Ints(v)
            } else {
                let mut v = vec![self.ty()?];
                while self.peek() == Some(',') {
                    self.pos += 1;
                    v.push(self.ty()?);
                }
                Arg::Types(v)
            };
            self.expect(']')?;
            Ok(arg)
        } else if self.starts_int() {
            Ok(Arg::Int(self.int()?))
        } else {
            Ok(Arg::Type(self.ty()?))
        }
    }

    fn ty(&mut self) -> Result<Datatype> {
        let name = self.ident()?.to_ascii_lowercase();
        let basic = match name.as_str() {
            "byte" => Some(&*BYTE),
            "char" => Some(&*CHAR),
            "int32" | "int" => Some(&*INT32),
            "int64" | "long" => Some(&*INT64),
            "float" => Some(&*FLOAT),
            "double" => Some(&*DOUBLE),
            _ => None,
        };
        if let Some(b) = basic {
            return Ok(b.clone());
        }
        self.expect('(')?;
        let mut args = vec![self.arg()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            args.push(self.arg()?);
        }
        self.expect(')')?;
        let bad = || Error::arg(format!("type expression: bad arguments to {name}"));
        use Arg::*;
        let ty = match (name.as_str(), args.as_slice()) {
            ("contiguous", [Int(n), Type(t)]) => Datatype::contiguous(*n, t)?,
            ("vector", [Int(c), Int(b), Int(s), Type(t)]) => Datatype::vector(*c, *b, *s, t)?,
            ("hvector", [Int(c), Int(b), Int(s), Type(t)]) => Datatype::hvector(*c, *b, *s, t)?,
            ("indexed_block", [Int(b), Ints(d), Type(t)]) => Datatype::indexed_block(*b, d, t)?,
            ("struct", [Ints(b), Ints(d), Types(t)]) => Datatype::create_struct(b, d, t)?,
            ("subarray", [Ints(f), Ints(s), Ints(o), Type(t)]) => Datatype::subarray(f, s, o, Order::C, t)?,
            ("resized", [Int(lb), Int(ext), Type(t)]) => Datatype::resized(*lb, *ext, t)?,
            _ => return Err(bad()),
        };
        Ok(ty.committed())
    }
}
