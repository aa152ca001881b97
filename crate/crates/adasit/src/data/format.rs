//! Line format for episode records.
//!
//! One episode per line: the binary label, then one parenthesized group per
//! event in time order.
//!
//! ```text
//! line  := label group+
//! label := "0" | "1"
//! group := "(" type_index "," "[" int_list? "]" "," "[" num_list? "]" "," time ")"
//! ```
//!
//! List entries are separated by spaces; whitespace between tokens is
//! ignored. Example:
//!
//! ```text
//! 1 (0,[2 5],[0.31 -1.2],0) (3,[],[0.5],1.25)
//! ```
//!
//! Numbers use standard decimal or scientific notation. The writer emits the
//! shortest representation that parses back to the identical value, so a
//! write/parse round trip is exact.

use crate::data::{EpisodeSample, EventRecord};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str) -> Self {
        Cursor {
            bytes: line.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> String {
        format!("col {}: {}", self.pos + 1, message.into())
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.bytes.len()
    }

    fn expect(&mut self, ch: u8) -> Result<(), String> {
        self.skip_ws();
        match self.peek() {
            Some(b) if b == ch => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => Err(self.err(format!("expected '{}', found '{}'", ch as char, b as char))),
            None => Err(self.err(format!("expected '{}', found end of line", ch as char))),
        }
    }

    /// Longest run of number characters starting at the cursor.
    fn number_token(&mut self) -> Result<&'a str, String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'0'..=b'9' | b'+' | b'-' | b'.' | b'e' | b'E' => self.pos += 1,
                _ => break,
            }
        }
        if self.pos == start {
            return Err(self.err("expected a number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.err("invalid utf-8"))
    }

    fn parse_usize(&mut self, what: &str) -> Result<usize, String> {
        let tok = self.number_token()?;
        tok.parse::<usize>()
            .map_err(|_| self.err(format!("invalid {what} '{tok}'")))
    }

    fn parse_f64(&mut self, what: &str) -> Result<f64, String> {
        let tok = self.number_token()?;
        tok.parse::<f64>()
            .map_err(|_| self.err(format!("invalid {what} '{tok}'")))
    }

    fn list_has_more(&mut self) -> bool {
        self.skip_ws();
        !matches!(self.peek(), Some(b']') | None)
    }
}

/// Parses one episode line. Errors carry a column position; the caller adds
/// file path and line number.
pub fn parse_episode_line(line: &str) -> Result<EpisodeSample, String> {
    let mut cur = Cursor::new(line);

    cur.skip_ws();
    let label = match cur.peek() {
        Some(b'0') => false,
        Some(b'1') => true,
        _ => return Err(cur.err("expected label '0' or '1'")),
    };
    cur.pos += 1;

    let mut events = Vec::new();
    while !cur.at_end() {
        cur.expect(b'(')?;
        let event_type = cur.parse_usize("event type index")?;
        cur.expect(b',')?;

        cur.expect(b'[')?;
        let mut value_c = Vec::new();
        while cur.list_has_more() {
            value_c.push(cur.parse_usize("categorical code")?);
        }
        cur.expect(b']')?;
        cur.expect(b',')?;

        cur.expect(b'[')?;
        let mut value_n = Vec::new();
        while cur.list_has_more() {
            value_n.push(cur.parse_f64("numeric value")?);
        }
        cur.expect(b']')?;
        cur.expect(b',')?;

        let time = cur.parse_f64("time")?;
        cur.expect(b')')?;

        events.push(EventRecord {
            event_type,
            value_c,
            value_n,
            time,
        });
    }

    if events.is_empty() {
        return Err("episode has no events".to_string());
    }
    Ok(EpisodeSample { events, label })
}

/// Writes one episode as a line (no trailing newline).
pub fn write_episode_line(sample: &EpisodeSample) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    out.push(if sample.label { '1' } else { '0' });
    for e in &sample.events {
        write!(out, " ({},[", e.event_type).unwrap();
        for (i, c) in e.value_c.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{c}").unwrap();
        }
        out.push_str("],[");
        for (i, v) in e.value_n.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        write!(out, "],{})", e.time).unwrap();
    }
    out
}
