use std::fmt;
use std::io::{self, Write};

use crate::netsim::packet::FlowKey;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Send,
    Deliver,
    DropLoss,
    DropTtl,
    DropCensor,
    DropUnroutable,
    Deflect,
    Inject,
    Tamper,
    Throttle,
    Flag,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Send => "send",
            Action::Deliver => "deliver",
            Action::DropLoss => "drop-loss",
            Action::DropTtl => "drop-ttl",
            Action::DropCensor => "drop-censor",
            Action::DropUnroutable => "drop-unroutable",
            Action::Deflect => "deflect",
            Action::Inject => "inject",
            Action::Tamper => "tamper",
            Action::Throttle => "throttle",
            Action::Flag => "flag",
        }
    }

    /// Ends the packet's life in the network.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Action::Deliver | Action::DropLoss | Action::DropTtl | Action::DropCensor | Action::DropUnroutable
        )
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub time: SimTime,
    /// Path position: 0 is the inside host, hops follow, the outside hosts
    /// are last.
    pub hop: usize,
    pub packet_id: u64,
    pub action: Action,
    pub flow: FlowKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, action: Action) -> usize {
        self.records.iter().filter(|r| r.action == action).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time_us,hop,packet_id,action,flow")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.time.as_micros(), r.hop, r.packet_id, r.action, r.flow)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii")
    }
}
