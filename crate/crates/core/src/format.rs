//! On-disk formats: the `VDRL` binary event file and dense-code CSV.
//!
//! Event file layout (little-endian):
//!
//! ```text
//! magic "VDRL" | version u8 = 1 | num_channels u8 | k u8 | reserved u8
//! max_run_length u16 | base_rate_hz u32 | event_count u32
//! event_count × { value i8, length u16 }
//! ```
//!
//! Trailing `(0, 0)` records are padding and are dropped on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::{DenseCodes, EventSequence, Run};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MAGIC: &[u8; 4] = b"VDRL";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 18;
const RECORD_LEN: usize = 3;

pub fn write_events<W: Write>(mut w: W, seq: &EventSequence) -> Result<()> {
    let narrow = |what: &str, v: u64, max: u64| -> Result<()> {
        if v > max {
            Err(Error::OutOfRange(format!("{what} = {v} does not fit the event file header")))
        } else {
            Ok(())
        }
    };
    narrow("num_channels", seq.num_channels() as u64, u8::MAX as u64)?;
    narrow("k", seq.k() as u64, i8::MAX as u64)?;
    narrow("max_run_length", seq.max_run_length() as u64, u16::MAX as u64)?;
    narrow("event_count", seq.len() as u64, u32::MAX as u64)?;

    let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * seq.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(seq.num_channels() as u8);
    buf.push(seq.k() as u8);
    buf.push(0);
    buf.extend_from_slice(&(seq.max_run_length() as u16).to_le_bytes());
    buf.extend_from_slice(&seq.base_rate_hz().to_le_bytes());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    for e in seq.events() {
        buf.push(e.value as i8 as u8);
        buf.extend_from_slice(&(e.length as u16).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_events<R: Read>(mut r: R) -> Result<EventSequence> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported event file version {}", bytes[4])));
    }
    let num_channels = bytes[5] as usize;
    let k = bytes[6] as u32;
    let max_run_length = u16::from_le_bytes([bytes[8], bytes[9]]) as u32;
    let base_rate_hz = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * RECORD_LEN {
        return Err(Error::Format(format!("header announces {count} events but body holds {} bytes", body.len())));
    }
    let mut events: Vec<Run> = body
        .chunks_exact(RECORD_LEN)
        .map(|rec| Run::new(rec[0] as i8 as i32, u16::from_le_bytes([rec[1], rec[2]]) as u32))
        .collect();
    let used = events.iter().take_while(|e| e.length > 0).count();
    if let Some(bad) = events[used..].iter().position(|e| *e != Run::PADDING) {
        return Err(Error::Format(format!(
            "padding record at index {used} followed by a real event at index {}",
            used + bad
        )));
    }
    events.truncate(used);
    EventSequence::new(events, num_channels, k, max_run_length, base_rate_hz)
}

pub fn save_events(path: impl AsRef<Path>, seq: &EventSequence) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_events(std::io::BufWriter::new(file), seq)
}

pub fn load_events(path: impl AsRef<Path>) -> Result<EventSequence> {
    read_events(std::fs::File::open(path)?)
}

/// Writes one row per time step, one integer column per channel, no header.
pub fn write_dense_csv<W: Write>(w: W, codes: &Grid<i32>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for t in 0..codes.steps() {
        writer.write_record(codes.row(t).iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dense_csv<R: Read>(r: R) -> Result<Grid<i32>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(r);
    let mut data = Vec::new();
    let mut channels = None;
    let mut steps = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let width = *channels.get_or_insert(record.len());
        if record.len() != width {
            return Err(Error::Format(format!("row {} has {} columns, expected {width}", line + 1, record.len())));
        }
        for field in record.iter() {
            data.push(
                field
                    .parse::<i32>()
                    .map_err(|e| Error::Format(format!("row {}: {field:?} is not an integer ({e})", line + 1)))?,
            );
        }
        steps += 1;
    }
    Grid::new(steps, channels.unwrap_or(0), data)
}

pub fn save_dense_csv(path: impl AsRef<Path>, codes: &DenseCodes) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dense_csv(std::io::BufWriter::new(file), codes.levels())
}

pub fn load_dense_csv(path: impl AsRef<Path>, k: u32, base_rate_hz: u32) -> Result<DenseCodes> {
    let grid = read_dense_csv(std::fs::File::open(path)?)?;
    DenseCodes::new(grid, k, base_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventSequence {
        let events = [(2, 3), (0, 2), (1, 6), (3, 2), (-7, 3)].iter().map(|&(v, l)| Run::new(v, l)).collect();
        EventSequence::new(events, 2, 7, 256, 250).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut buf = Vec::new();
        write_events(&mut buf, &sample()).unwrap();
        assert_eq!(buf.len(), 18 + 5 * 3);
        assert_eq!(&buf[..8], b"VDRL\x01\x02\x07\x00");
        assert_eq!(&buf[8..10], &256u16.to_le_bytes());
        assert_eq!(&buf[10..14], &250u32.to_le_bytes());
        assert_eq!(&buf[14..18], &5u32.to_le_bytes());
        assert_eq!(&buf[30..33], &[0xf9, 3, 0]);
        assert_eq!(read_events(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn trailing_padding_is_dropped() {
        let mut buf = Vec::new();
        write_events(&mut buf, &sample()).unwrap();
        buf[14..18].copy_from_slice(&7u32.to_le_bytes());
        buf.extend_from_slice(&[0, 0, 0, 0, 0, 0]);
        assert_eq!(read_events(buf.as_slice()).unwrap().len(), 5);
    }

    #[test]
    fn interior_padding_is_rejected() {
        let mut buf = Vec::new();
        write_events(&mut buf, &sample()).unwrap();
        buf[18 + 3..18 + 6].copy_from_slice(&[0, 0, 0]);
        assert!(matches!(read_events(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_events(&mut buf, &sample()).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_events(bad_magic.as_slice()).is_err());
        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(read_events(bad_version.as_slice()).is_err());
        assert!(read_events(&buf[..buf.len() - 1]).is_err());
        assert!(read_events(&buf[..10]).is_err());
    }

    #[test]
    fn dense_csv_round_trip() {
        let grid = Grid::from_columns(&[vec![1, -2, 3], vec![0, 7, -7]]).unwrap();
        let mut buf = Vec::new();
        write_dense_csv(&mut buf, &grid).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "1,0\n-2,7\n3,-7\n");
        assert_eq!(read_dense_csv(buf.as_slice()).unwrap(), grid);
        assert!(read_dense_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_dense_csv("1,x\n".as_bytes()).is_err());
    }
}
