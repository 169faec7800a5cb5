use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use eocd::Error;
use serde::Serialize;

/// Standard output, mirrored into an optional log file.
pub struct Output {
    log: Option<File>,
}

impl Output {
    pub fn new(log: Option<&Path>) -> eocd::Result<Self> {
        let log = match log {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::Io {
                        path: p.to_path_buf(),
                        source: e,
                    })?,
            ),
            None => None,
        };
        Ok(Self { log })
    }

    pub fn line(&mut self, s: &str) {
        println!("{s}");
        self.mirror(s);
    }

    pub fn error(&mut self, s: &str) {
        eprintln!("{s}");
        self.mirror(s);
    }

    fn mirror(&mut self, s: &str) {
        if let Some(f) = &mut self.log {
            // a failing log file must not abort the command itself
            let _ = writeln!(f, "{s}");
        }
    }

    /// Command name and resolved arguments, as comment lines.
    pub fn header(&mut self, command: &str, args: &[(&str, String)]) {
        self.line(&format!("# eocd {command}"));
        for (k, v) in args {
            self.line(&format!("# {k} = {v}"));
        }
    }

    /// Header followed by the effective configuration in config-file syntax.
    /// A non-empty `section` wraps `value` in that table.
    pub fn config<T: Serialize>(
        &mut self,
        command: &str,
        args: &[(&str, String)],
        section: &str,
        value: &T,
    ) -> eocd::Result<()> {
        self.header(command, args);
        let body = toml::to_string(value).map_err(|e| Error::Config(format!("cannot echo config: {e}")))?;
        let text = if section.is_empty() {
            body
        } else {
            // nested tables such as [augment] become [section.augment]
            let mut s = format!("[{section}]\n");
            for line in body.lines() {
                match line.strip_prefix('[') {
                    Some(rest) => s.push_str(&format!("[{section}.{rest}\n")),
                    None => s.push_str(&format!("{line}\n")),
                }
            }
            s
        };
        self.line(text.trim_end());
        self.line("# ---");
        Ok(())
    }
}
