//! Line-oriented text form of an [`EffectiveSchedule`]. Floats are written in shortest
//! round-trip form so a reload reproduces the schedule bit for bit.

use std::io::{BufRead, Write};

use crate::mode_streams::{ChiSamples, EffectiveSchedule, IntervalEnd, ScheduleInterval};
use crate::{CMatrix, Error, Result, C64};

const MAGIC: &str = "kotelnikov_schedule v1";

/// Writes `schedule` with `tag` (typically a configuration hash) in the header.
pub fn write_schedule<W: Write>(mut w: W, schedule: &EffectiveSchedule, tag: &str) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tag {tag}")?;
    writeln!(w, "horizon {:?}", schedule.horizon)?;
    writeln!(w, "carrier {:?}", schedule.carrier)?;
    write_list(&mut w, "coupling_times", &schedule.coupling_times)?;
    write_list(&mut w, "decoupling_times", &schedule.decoupling_times)?;
    writeln!(w, "intervals {}", schedule.intervals.len())?;
    for iv in &schedule.intervals {
        writeln!(w, "interval {:?} {:?} {} {} {}", iv.start, iv.end, iv.terminal.label(), iv.frame.nrows(), iv.rank())?;
        write_matrix(&mut w, "frame", &iv.frame)?;
        write_matrix(&mut w, "generator", &iv.generator)?;
        writeln!(w, "chi {} {:?}", iv.chi.times.len(), iv.chi.carrier)?;
        for (i, t) in iv.chi.times.iter().enumerate() {
            write!(w, "{t:?}")?;
            for z in iv.chi.values.row(i).iter() {
                write!(w, " {:?} {:?}", z.re, z.im)?;
            }
            writeln!(w)?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

fn write_list<W: Write>(w: &mut W, key: &str, xs: &[f64]) -> Result<()> {
    write!(w, "{key} {}", xs.len())?;
    for x in xs {
        write!(w, " {x:?}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, key: &str, m: &CMatrix) -> Result<()> {
    writeln!(w, "{key} {} {}", m.nrows(), m.ncols())?;
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|z| format!("{:?} {:?}", z.re, z.im)).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::ScheduleFormat { line: self.line, reason: reason.into() }
    }

    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    /// Next line, which must start with `key`; returns the remaining fields.
    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(it.map(str::to_string).collect())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let v: Vec<f64> = l.split_whitespace().map(|s| self.parse(s)).collect::<Result<_>>()?;
        if v.len() != expected {
            return Err(self.err(format!("expected {expected} numbers, found {}", v.len())));
        }
        Ok(v)
    }

    fn list(&mut self, key: &str) -> Result<Vec<f64>> {
        let f = self.keyed(key)?;
        let n: usize = self.parse(f.first().ok_or_else(|| self.err("missing count"))?)?;
        if f.len() != n + 1 {
            return Err(self.err(format!("`{key}` lists {} values, header says {n}", f.len() - 1)));
        }
        f[1..].iter().map(|s| self.parse(s)).collect()
    }

    fn matrix(&mut self, key: &str) -> Result<CMatrix> {
        let f = self.keyed(key)?;
        if f.len() != 2 {
            return Err(self.err("expected matrix shape"));
        }
        let (r, c): (usize, usize) = (self.parse(&f[0])?, self.parse(&f[1])?);
        let mut m = CMatrix::zeros(r, c);
        for i in 0..r {
            let v = self.floats(2 * c)?;
            for j in 0..c {
                m[(i, j)] = C64::new(v[2 * j], v[2 * j + 1]);
            }
        }
        Ok(m)
    }
}

/// Reads a schedule; returns it with its header tag.
pub fn read_schedule<R: BufRead>(r: R) -> Result<(EffectiveSchedule, String)> {
    let mut l = Lines { inner: r.lines(), line: 0 };
    if l.next_line()?.trim() != MAGIC {
        return Err(l.err("not a schedule file"));
    }
    let tag = l.keyed("tag")?.join(" ");
    let horizon: f64 = {
        let f = l.keyed("horizon")?;
        l.parse(f.first().ok_or_else(|| l.err("missing value"))?)?
    };
    let carrier: f64 = {
        let f = l.keyed("carrier")?;
        l.parse(f.first().ok_or_else(|| l.err("missing value"))?)?
    };
    let coupling_times = l.list("coupling_times")?;
    let decoupling_times = l.list("decoupling_times")?;
    let n_intervals: usize = {
        let f = l.keyed("intervals")?;
        l.parse(f.first().ok_or_else(|| l.err("missing count"))?)?
    };
    let mut intervals = Vec::with_capacity(n_intervals);
    for _ in 0..n_intervals {
        let f = l.keyed("interval")?;
        if f.len() != 5 {
            return Err(l.err("interval header needs start, end, terminal, sites, rank"));
        }
        let start: f64 = l.parse(&f[0])?;
        let end: f64 = l.parse(&f[1])?;
        let terminal = IntervalEnd::from_label(&f[2]).ok_or_else(|| l.err(format!("unknown terminal `{}`", f[2])))?;
        let (sites, rank): (usize, usize) = (l.parse(&f[3])?, l.parse(&f[4])?);
        let frame = l.matrix("frame")?;
        if frame.shape() != (sites, rank) {
            return Err(l.err("frame shape disagrees with the interval header"));
        }
        let generator = l.matrix("generator")?;
        if generator.shape() != (rank, rank) {
            return Err(l.err("generator shape disagrees with the rank"));
        }
        let f = l.keyed("chi")?;
        if f.len() != 2 {
            return Err(l.err("chi header needs sample count and carrier"));
        }
        let n_samples: usize = l.parse(&f[0])?;
        let chi_carrier: f64 = l.parse(&f[1])?;
        let mut times = Vec::with_capacity(n_samples);
        let mut values = CMatrix::zeros(n_samples, rank);
        for i in 0..n_samples {
            let v = l.floats(1 + 2 * rank)?;
            times.push(v[0]);
            for j in 0..rank {
                values[(i, j)] = C64::new(v[1 + 2 * j], v[2 + 2 * j]);
            }
        }
        intervals.push(ScheduleInterval {
            start,
            end,
            terminal,
            frame,
            generator,
            chi: ChiSamples { times, values, carrier: chi_carrier },
        });
    }
    if l.next_line()?.trim() != "end" {
        return Err(l.err("expected `end`"));
    }
    Ok((EffectiveSchedule { horizon, carrier, intervals, coupling_times, decoupling_times }, tag))
}
