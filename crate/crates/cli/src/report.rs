use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::config::{Format, RunConfig};
use crate::Failure;

/// Rows for CSV output.
#[derive(Debug, Default)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        self.rows
            .push(row.into_iter().map(|c| c.to_string()).collect());
    }
}

/// What a subcommand hands back: its verdict, a JSON body and a table.
pub struct Outcome {
    pub passed: bool,
    pub result: Value,
    pub table: Table,
}

impl Outcome {
    pub fn new<T: Serialize>(passed: bool, result: &T, table: Table) -> Result<Self, Failure> {
        Ok(Self {
            passed,
            result: serde_json::to_value(result).map_err(|e| Failure::runtime(e.to_string()))?,
            table,
        })
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a Value,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<u64>,
    passed: bool,
    result: &'a Value,
}

fn render(cfg: &RunConfig, command: &str, args: &Value, out: &Outcome) -> Result<Vec<u8>, Failure> {
    let env = Envelope {
        tool: "liebox",
        version: env!("CARGO_PKG_VERSION"),
        command,
        args,
        config: cfg,
        timestamp: cfg.timestamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        }),
        passed: out.passed,
        result: &out.result,
    };
    let err = |e: &dyn std::fmt::Display| Failure::runtime(e.to_string());
    match cfg.format {
        Format::Json => {
            let mut s = serde_json::to_vec_pretty(&env).map_err(|e| err(&e))?;
            s.push(b'\n');
            Ok(s)
        }
        Format::Csv => {
            let mut buf = Vec::new();
            writeln!(buf, "# liebox {} {command}", env.version).map_err(|e| err(&e))?;
            writeln!(
                buf,
                "# config {}",
                serde_json::to_string(cfg).map_err(|e| err(&e))?
            )
            .map_err(|e| err(&e))?;
            writeln!(
                buf,
                "# args {}",
                serde_json::to_string(args).map_err(|e| err(&e))?
            )
            .map_err(|e| err(&e))?;
            if let Some(t) = env.timestamp {
                writeln!(buf, "# timestamp {t}").map_err(|e| err(&e))?;
            }
            writeln!(buf, "# passed {}", out.passed).map_err(|e| err(&e))?;
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(&out.table.header).map_err(|e| err(&e))?;
            for row in &out.table.rows {
                w.write_record(row).map_err(|e| err(&e))?;
            }
            w.into_inner().map_err(|e| err(&e))
        }
    }
}

pub fn emit(cfg: &RunConfig, command: &str, args: &Value, out: &Outcome) -> Result<(), Failure> {
    let bytes = render(cfg, command, args, out)?;
    match &cfg.output {
        Some(p) => {
            std::fs::write(p, bytes).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| Failure::runtime(e.to_string())),
    }
}
