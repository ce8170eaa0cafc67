//! JSON Lines trace files: a header line, then one instance per line.
//! Gzip input is detected from its magic bytes.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::MultiGzDecoder;

use super::{validate, InstanceTrace, TraceError, TraceHeader, FORMAT_VERSION};

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Lazy reader over a trace stream. Yields traces in file order.
pub struct TraceReader<R> {
    input: R,
    header: Arc<TraceHeader>,
    offset: u64,
    line: String,
    done: bool,
}

impl<R: BufRead> TraceReader<R> {
    /// Parses the header line. Blank lines before it are skipped.
    pub fn new(mut input: R) -> Result<Self, TraceError> {
        let mut line = String::new();
        let mut offset = 0u64;
        loop {
            line.clear();
            let n = input.read_line(&mut line)?;
            if n == 0 {
                return Err(TraceError::MissingHeader);
            }
            let start = offset;
            offset += n as u64;
            if line.trim().is_empty() {
                continue;
            }
            let header = parse_header(line.trim(), start)?;
            return Ok(Self {
                input,
                header: Arc::new(header),
                offset,
                line,
                done: false,
            });
        }
    }

    pub fn header(&self) -> &Arc<TraceHeader> {
        &self.header
    }

    fn next_record(&mut self) -> Result<Option<InstanceTrace>, TraceError> {
        loop {
            self.line.clear();
            let n = self.input.read_line(&mut self.line)?;
            if n == 0 {
                return Ok(None);
            }
            let start = self.offset;
            self.offset += n as u64;
            let text = self.line.trim();
            if text.is_empty() {
                continue;
            }
            let mut trace: InstanceTrace =
                serde_json::from_str(text).map_err(|e| TraceError::Malformed {
                    offset: start,
                    instance_id: sniff_instance_id(text),
                    message: e.to_string(),
                })?;
            trace.header_ref = Arc::clone(&self.header);
            return Ok(Some(trace));
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<InstanceTrace, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(t)) => Some(Ok(t)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn parse_header(text: &str, offset: u64) -> Result<TraceHeader, TraceError> {
    let malformed = |message: String| TraceError::Malformed {
        offset,
        instance_id: None,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(format!("header: {e}")))?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(TraceError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(malformed("header lacks an integer format_version".into())),
    }
    serde_json::from_value(value).map_err(|e| malformed(format!("header: {e}")))
}

/// Best-effort recovery of the instance id from a record that failed to parse.
fn sniff_instance_id(text: &str) -> Option<String> {
    let key = "\"instance_id\"";
    let rest = &text[text.find(key)? + key.len()..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let rest = rest.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => return Some(out),
            '\\' => out.push(chars.next()?),
            c => out.push(c),
        }
    }
    None
}

/// Reads a trace stream, transparently decompressing gzip.
pub fn read_traces<R: Read + 'static>(source: R) -> Result<TraceReader<Box<dyn BufRead>>, TraceError> {
    let mut buffered = BufReader::new(source);
    let is_gzip = buffered.fill_buf()?.starts_with(&GZIP_MAGIC);
    let input: Box<dyn BufRead> = if is_gzip {
        Box::new(BufReader::new(MultiGzDecoder::new(buffered)))
    } else {
        Box::new(buffered)
    };
    TraceReader::new(input)
}

pub fn open_traces(path: impl AsRef<Path>) -> Result<TraceReader<Box<dyn BufRead>>, TraceError> {
    read_traces(File::open(path)?)
}

/// Incremental writer. Validates every trace and requires a shared header.
pub struct TraceWriter<W: Write> {
    sink: W,
    header: Arc<TraceHeader>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut sink: W, header: Arc<TraceHeader>) -> Result<Self, TraceError> {
        serde_json::to_writer(&mut sink, header.as_ref())?;
        sink.write_all(b"\n")?;
        Ok(Self { sink, header })
    }

    pub fn write(&mut self, trace: &InstanceTrace) -> Result<(), TraceError> {
        if !Arc::ptr_eq(&trace.header_ref, &self.header) && *trace.header_ref != *self.header {
            return Err(TraceError::InconsistentHeader {
                instance_id: trace.instance_id.clone(),
            });
        }
        let violations = validate(trace);
        if !violations.is_empty() {
            return Err(TraceError::Invalid {
                instance_id: trace.instance_id.clone(),
                violations,
            });
        }
        serde_json::to_writer(&mut self.sink, trace)?;
        self.sink.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.sink.flush()?;
        Ok(self.sink)
    }
}

/// Writes `traces` under `header`. Every trace is validated first; nothing
/// is written if any trace is inconsistent or invalid.
pub fn write_traces<W: Write>(
    header: &Arc<TraceHeader>,
    traces: &[InstanceTrace],
    sink: W,
) -> Result<(), TraceError> {
    for t in traces {
        if *t.header_ref != **header {
            return Err(TraceError::InconsistentHeader {
                instance_id: t.instance_id.clone(),
            });
        }
        let violations = validate(t);
        if !violations.is_empty() {
            return Err(TraceError::Invalid {
                instance_id: t.instance_id.clone(),
                violations,
            });
        }
    }
    let mut writer = TraceWriter::new(sink, Arc::clone(header))?;
    for t in traces {
        writer.write(t)?;
    }
    writer.finish()?;
    Ok(())
}
