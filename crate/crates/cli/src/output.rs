use std::fmt::Display;

use serde_json::{json, Value};

use crate::failure::Failure;

/// Text for people, one JSON object per line with `--json`.
pub struct Output {
    json: bool,
}

impl Output {
    pub fn new(json: bool) -> Self {
        Output { json }
    }

    pub fn emit(&self, text: impl Display, value: Value) {
        if self.json {
            println!("{value}");
        } else {
            println!("{text}");
        }
    }

    /// A line that only exists in JSON mode.
    pub fn event(&self, value: Value) {
        if self.json {
            println!("{value}");
        }
    }

    pub fn error(&self, f: &Failure) {
        if self.json {
            println!(
                "{}",
                json!({"event": "error", "kind": f.kind(), "code": f.code(), "message": f.to_string()})
            );
        } else {
            eprintln!("error: {f}");
        }
    }
}
