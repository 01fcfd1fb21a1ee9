//! SDPA sparse format (.dat-s) reader and writer.
//!
//! The file describes, in SDPA's own convention,
//!
//! ```text
//! (D)  max  tr(F0 Y)   s.t.  tr(Fi Y) = c_i  (i = 1..m),  Y >= 0,
//! ```
//!
//! which maps onto the native model as `min <C, Y>` with `C = -F0`,
//! constraint matrices `A_i = F_i` and right-hand side `b = c`. Negative
//! block sizes denote diagonal blocks and become nonnegative vector blocks.
//! See `docs/format.md` for the bit-exact mapping.

use crate::error::{Error, Result};
use crate::linalg::{LinearMap, SymSparse};
use crate::problem::{BlockSpec, ConicProblem, Objective};

struct Tokens<'a> {
    items: std::vec::IntoIter<(usize, &'a str)>,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.starts_with('"') || t.starts_with('*') {
                continue;
            }
            for tok in t
                .split(|c: char| c.is_whitespace() || matches!(c, ',' | '(' | ')' | '{' | '}'))
                .filter(|s| !s.is_empty())
            {
                items.push((ln + 1, tok));
            }
        }
        Tokens {
            items: items.into_iter(),
            last_line: 0,
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.items.next() {
            Some((ln, tok)) => {
                self.last_line = ln;
                Ok((ln, tok))
            }
            None => Err(Error::Parse {
                line: self.last_line,
                msg: format!("unexpected end of file while reading {what}"),
            }),
        }
    }

    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let (ln, tok) = self.next(what)?;
        tok.parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("invalid {what}: `{tok}`"),
        })
    }

    fn next_i64(&mut self, what: &str) -> Result<i64> {
        let (ln, tok) = self.next(what)?;
        tok.parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("invalid {what}: `{tok}`"),
        })
    }

    fn next_f64(&mut self, what: &str) -> Result<f64> {
        let (ln, tok) = self.next(what)?;
        tok.parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("invalid {what}: `{tok}`"),
        })
    }
}

/// Parse SDPA sparse text into a linear-objective problem.
pub fn parse_sdpa(text: &str) -> Result<ConicProblem> {
    let mut toks = Tokens::new(text);
    let m = toks.next_usize("mDim")?;
    let nblocks = toks.next_usize("nBlocks")?;
    if nblocks == 0 {
        return Err(Error::Parse {
            line: toks.last_line,
            msg: "nBlocks must be positive".into(),
        });
    }
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let s = toks.next_i64("blockStruct entry")?;
        if s == 0 {
            return Err(Error::Parse {
                line: toks.last_line,
                msg: "zero block size".into(),
            });
        }
        if s > 0 {
            blocks.push(BlockSpec::psd(s as usize));
        } else {
            blocks.push(BlockSpec::nonneg((-s) as usize));
        }
    }
    let mut b = Vec::with_capacity(m);
    for _ in 0..m {
        b.push(toks.next_f64("c-vector entry")?);
    }

    // entries per (matrix, block): matno 0 holds F0, the negated cost
    let mut entries: Vec<Vec<Vec<(usize, usize, f64)>>> =
        vec![vec![Vec::new(); nblocks]; m + 1];
    loop {
        let (ln, tok) = match toks.items.next() {
            Some(x) => x,
            None => break,
        };
        toks.last_line = ln;
        let matno: usize = tok.parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("invalid matrix number `{tok}`"),
        })?;
        if matno > m {
            return Err(Error::Parse {
                line: ln,
                msg: format!("matrix number {matno} out of range 0..={m}"),
            });
        }
        let blk = toks.next_usize("block number")?;
        if blk == 0 || blk > nblocks {
            return Err(Error::Parse {
                line: toks.last_line,
                msg: format!("block number {blk} out of range 1..={nblocks}"),
            });
        }
        let i = toks.next_usize("row index")?;
        let j = toks.next_usize("column index")?;
        let v = toks.next_f64("entry value")?;
        let dim = blocks[blk - 1].dim;
        if i == 0 || j == 0 || i > dim || j > dim {
            return Err(Error::Parse {
                line: toks.last_line,
                msg: format!("index ({i},{j}) out of range for block {blk} of size {dim}"),
            });
        }
        if blocks[blk - 1].kind == crate::problem::BlockKind::NonnegVector && i != j {
            return Err(Error::Parse {
                line: toks.last_line,
                msg: format!("off-diagonal entry ({i},{j}) in diagonal block {blk}"),
            });
        }
        entries[matno][blk - 1].push((i - 1, j - 1, v));
    }

    let mut a_maps = Vec::with_capacity(nblocks);
    let mut costs = Vec::with_capacity(nblocks);
    for (k, spec) in blocks.iter().enumerate() {
        let mut mats = Vec::with_capacity(m);
        for mat in entries.iter().skip(1) {
            mats.push(SymSparse::new(spec.dim, mat[k].iter().cloned())?);
        }
        a_maps.push(LinearMap::new(spec.dim, mats)?);
        // C = -F0
        let mut cost = SymSparse::new(spec.dim, entries[0][k].iter().cloned())?;
        cost.scale(-1.0);
        costs.push(cost);
    }
    ConicProblem::new(blocks, a_maps, b, Objective::Linear(costs))
}

/// Write a linear-objective problem in SDPA sparse format. The written text
/// parses back to a structurally identical problem.
pub fn write_sdpa(prob: &ConicProblem) -> Result<String> {
    let costs = prob.objective().linear_costs().ok_or_else(|| {
        Error::InvalidInput("SDPA files carry linear objectives only".into())
    })?;
    if prob.has_side() {
        return Err(Error::InvalidInput(
            "SDPA sparse format has no side-constraint section".into(),
        ));
    }
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "\"generated by lrsdp");
    let m = prob.num_constraints();
    let _ = writeln!(out, "{m}");
    let _ = writeln!(out, "{}", prob.blocks().len());
    let bs: Vec<String> = prob
        .blocks()
        .iter()
        .map(|s| match s.kind {
            crate::problem::BlockKind::PsdMatrix => format!("{}", s.dim),
            crate::problem::BlockKind::NonnegVector => format!("-{}", s.dim),
            crate::problem::BlockKind::FreeVector => String::new(),
        })
        .collect();
    if bs.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidInput(
            "SDPA sparse format has no free vector blocks".into(),
        ));
    }
    let _ = writeln!(out, "{}", bs.join(" "));
    let bvals: Vec<String> = prob.b().iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", bvals.join(" "));

    // F0 = -C
    for (blk, cost) in costs.iter().enumerate() {
        for &(i, j, v) in cost.entries() {
            let _ = writeln!(out, "0 {} {} {} {}", blk + 1, i + 1, j + 1, -v);
        }
    }
    for (blk, map) in prob.a_maps().iter().enumerate() {
        for (k, a) in map.mats().iter().enumerate() {
            for &(i, j, v) in a.entries() {
                let _ = writeln!(out, "{} {} {} {} {}", k + 1, blk + 1, i + 1, j + 1, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{gen_theta, Graph, ThetaVariant};

    const TINY: &str = r#"
" one-constraint trace example
1
1
2
1.0
0 1 1 1 -1.0
0 1 2 2 -1.0
1 1 1 1 1.0
1 1 2 2 1.0
"#;

    #[test]
    fn parse_tiny_trace_example() {
        let prob = parse_sdpa(TINY).unwrap();
        assert_eq!(prob.num_constraints(), 1);
        assert_eq!(prob.blocks().len(), 1);
        assert_eq!(prob.b(), &[1.0]);
        // cost C = -F0 = I
        let c = prob.objective().linear_costs().unwrap()[0].clone();
        assert_eq!(c, SymSparse::identity(2));
        // round-trips through the builder representation
        let text = write_sdpa(&prob).unwrap();
        let again = parse_sdpa(&text).unwrap();
        assert_eq!(again.b(), prob.b());
        assert_eq!(
            again.objective().linear_costs().unwrap()[0],
            prob.objective().linear_costs().unwrap()[0]
        );
        assert_eq!(again.a_maps()[0].mats(), prob.a_maps()[0].mats());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let bad = "1\n1\n2\n1.0\n1 2 1 1 5.0\n";
        match parse_sdpa(bad) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5, "{msg}");
                assert!(msg.contains("block number"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_out_of_range_indices() {
        let bad = "1\n1\n2\n1.0\n1 1 3 3 5.0\n";
        match parse_sdpa(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn theta_round_trip_is_structurally_identical() {
        let prob = gen_theta(&Graph::cycle(5), ThetaVariant::Plain).unwrap();
        let text = write_sdpa(&prob).unwrap();
        let again = parse_sdpa(&text).unwrap();
        assert_eq!(again.b(), prob.b());
        assert_eq!(again.blocks(), prob.blocks());
        for (a, b) in again.a_maps()[0]
            .mats()
            .iter()
            .zip(prob.a_maps()[0].mats())
        {
            assert_eq!(a, b);
        }
        assert_eq!(
            again.objective().linear_costs().unwrap()[0],
            prob.objective().linear_costs().unwrap()[0]
        );
        // write o parse o write is byte-identical
        assert_eq!(write_sdpa(&again).unwrap(), text);
    }

    #[test]
    fn diagonal_blocks_become_nonneg_vectors() {
        let text = "1\n2\n2 -3\n4.0\n0 1 1 2 -0.5\n1 1 1 1 1.0\n1 2 2 2 2.0\n";
        let prob = parse_sdpa(text).unwrap();
        assert_eq!(prob.blocks().len(), 2);
        assert_eq!(prob.blocks()[1].kind, crate::problem::BlockKind::NonnegVector);
        assert_eq!(prob.blocks()[1].dim, 3);
        // off-diagonal entries in diagonal blocks are rejected
        let bad = "1\n2\n2 -3\n4.0\n1 2 1 2 1.0\n";
        assert!(matches!(parse_sdpa(bad), Err(Error::Parse { line: 5, .. })));
    }
}
