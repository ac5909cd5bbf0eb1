//! Benchmarks and demos for minimpi.
//!
//! Every scenario runs its ranks as in-process instances (or a thread
//! communicator inside one instance) and checks the data it moves, so a
//! timing run is also a correctness run. Results are plain numbers; the
//! `minimpi-bench` binary repeats them and writes CSV.

pub mod msgrate;
pub mod pingpong;
pub mod progress;

pub use msgrate::{msgrate, Mode, MsgRate, MsgRateParams};
pub use pingpong::{pingpong, Pattern, Placement};
pub use progress::{progress_demo, rendezvous_needs_receiver};

use std::io::{self, Write};

/// Median, minimum and maximum of a set of repetitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub reps: usize,
}

impl Summary {
    /// Panics on an empty sample or a NaN.
    pub fn of(samples: &[f64]) -> Summary {
        assert!(!samples.is_empty(), "no samples");
        let mut v = samples.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).expect("NaN sample"));
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Summary {
            median,
            min: v[0],
            max: v[n - 1],
            reps: n,
        }
    }
}

/// Runs `f` `reps` times and summarizes the results.
pub fn repeat<E>(reps: usize, mut f: impl FnMut() -> Result<f64, E>) -> Result<Summary, E> {
    let v = (0..reps.max(1)).map(|_| f()).collect::<Result<Vec<_>, E>>()?;
    Ok(Summary::of(&v))
}

/// Minimal CSV writer: a fixed header, then rows of already formatted
/// fields. None of the fields we emit contain commas or quotes.
pub struct Csv<W: Write> {
    out: W,
    width: usize,
}

impl<W: Write> Csv<W> {
    pub fn new(mut out: W, header: &[&str]) -> io::Result<Csv<W>> {
        writeln!(out, "{}", header.join(","))?;
        Ok(Csv {
            out,
            width: header.len(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        assert_eq!(fields.len(), self.width, "row width does not match the header");
        writeln!(self.out, "{}", fields.join(","))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Splits one CSV line produced by [`Csv`].
pub fn parse_row(line: &str) -> Vec<&str> {
    line.trim_end().split(',').collect()
}
