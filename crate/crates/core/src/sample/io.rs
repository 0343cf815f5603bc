use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::PanelDataset;
use crate::error::{Error, Result};
use crate::pipeline::Quarter;

/// How the `time` column is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeFormat {
    #[default]
    Integer,
    /// Times are quarter indices, written as `YYYY-Qn`.
    Quarter,
}

/// Write `bank,time,response,<features>,weight` with round-trip precision.
pub fn write_panel_csv<W: Write>(data: &PanelDataset, out: W, time_format: TimeFormat) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["bank".to_string(), "time".into(), "response".into()];
    header.extend(data.feature_names().iter().cloned());
    header.push("weight".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let t = data.times()[i];
        let mut rec = vec![
            data.bank_ids()[data.banks()[i]].clone(),
            match time_format {
                TimeFormat::Integer => t.to_string(),
                TimeFormat::Quarter => Quarter::from_index(t).to_string(),
            },
            data.response()[i].to_string(),
        ];
        rec.extend(data.features().row(i).iter().map(|v| v.to_string()));
        rec.push(data.weights()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<panel>".into(),
        source,
    })
}

/// Read a panel written by [`write_panel_csv`]; `time` may be an integer or
/// a `YYYY-Qn` quarter.
pub fn read_panel_csv<R: Read>(reader: R, source: &str) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let k = headers.len();
    let header_err = |message: &str| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: message.to_string(),
    };
    if k < 4 || headers[..3] != ["bank", "time", "response"] || headers[k - 1] != "weight" {
        return Err(header_err("header must be bank,time,response,<features...>,weight"));
    }
    let names: Vec<String> = headers[3..k - 1].to_vec();
    let d = names.len();
    let (mut ids, mut times, mut response, mut features, mut weights) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| parse_err(format!("column `{}`: `{}` is not a number", headers[j], &rec[j])))
        };
        ids.push(rec[0].to_string());
        let t = &rec[1];
        times.push(match t.parse::<i64>() {
            Ok(v) => v,
            Err(_) => t
                .parse::<Quarter>()
                .map_err(|_| parse_err(format!("time `{t}` is neither an integer nor a quarter")))?
                .index(),
        });
        response.push(num(2)?);
        for j in 0..d {
            features.push(num(3 + j)?);
        }
        weights.push(num(k - 1)?);
    }
    if ids.is_empty() {
        return Err(Error::Empty(format!("panel `{source}`")));
    }
    let x = DMatrix::from_row_slice(ids.len(), d, &features);
    PanelDataset::new(&ids, names, times, response, x, weights)
}

pub fn read_panel_file(path: &Path) -> Result<PanelDataset> {
    let file = crate::pipeline::open(path)?;
    read_panel_csv(file, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let ids: Vec<String> = ["b", "a", "b"].iter().map(|s| s.to_string()).collect();
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 1.0 / 3.0, 2.0, -1e-300, 5.5, 7.0]);
        let data = PanelDataset::new(&ids, vec!["x1".into(), "x2".into()], vec![8004, 8004, 8005], vec![0.1 + 0.2, 2.0, 3.0], x, vec![1.0, 0.5, 2.0])
            .unwrap();
        for fmt in [TimeFormat::Integer, TimeFormat::Quarter] {
            let mut buf = Vec::new();
            write_panel_csv(&data, &mut buf, fmt).unwrap();
            let back = read_panel_csv(buf.as_slice(), "mem").unwrap();
            assert_eq!(back, data);
        }
        let mut buf = Vec::new();
        write_panel_csv(&data, &mut buf, TimeFormat::Quarter).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("b,2001-Q1,"));
    }

    #[test]
    fn bad_inputs() {
        assert!(read_panel_csv("bank,time,y,weight\n".as_bytes(), "m").is_err());
        let text = "bank,time,response,x,weight\na,1,0.5,abc,1\n";
        assert!(matches!(read_panel_csv(text.as_bytes(), "m"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_panel_csv("bank,time,response,x,weight\n".as_bytes(), "m"), Err(Error::Empty(_))));
    }
}
