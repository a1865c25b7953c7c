//! Line reader shared by the plain-text formats (MDPs, count tables,
//! families). Blank lines and `#` comments are skipped.

use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    fn skip_blank(&mut self) {
        while let Some((_, line)) = self.inner.peek() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                self.inner.next();
            } else {
                break;
            }
        }
    }

    pub(crate) fn next_required(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_blank();
        match self.inner.next() {
            Some((i, line)) => {
                self.last = i + 1;
                Ok((i + 1, line.trim()))
            }
            None => Err(Error::parse(self.last + 1, format!("unexpected end of input, expected {what}"))),
        }
    }

    pub(crate) fn expect_keyword(&mut self, keyword: &str) -> Result<()> {
        let (no, line) = self.next_required(keyword)?;
        if line == keyword {
            Ok(())
        } else {
            Err(Error::parse(no, format!("expected `{keyword}`, found `{line}`")))
        }
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        self.skip_blank();
        match self.inner.next() {
            None => Ok(()),
            Some((i, line)) => Err(Error::parse(i + 1, format!("trailing content `{}`", line.trim()))),
        }
    }
}

pub(crate) fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

pub(crate) fn num<T: FromStr>(line: usize, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(line, format!("cannot parse `{field}`")))
}
