//! Policy weight files.
//!
//! ```text
//! chaoscope-policy 1
//! kind mlp
//! obs_dim 1
//! act_dim 1
//! hidden 64 64
//! recurrent 0
//! output tanh
//! action_low 0
//! action_high 4
//! gaussian true
//! tensor l0.w 64 1
//! 0.0123 ...
//! tensor l0.b 64
//! ...
//! end
//! ```
//!
//! Header keys may appear in any order; `hidden` is omitted for linear
//! policies, `recurrent` defaults to 0, `gaussian` to false, `output` to
//! identity, and the bounds are only needed for `output tanh`. Tensors
//! must follow in canonical order with the shapes the header implies.
//! Matrices are row-major, one row per line, though any whitespace
//! layout parses. Numbers are printed in shortest round-trip form so a
//! save/load/save cycle is byte-identical. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use super::{OutputMap, PolicyArch, PolicyKind, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &str = "chaoscope-policy";
const VERSION: u32 = 1;

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_weights(params: &PolicyParams) -> String {
    let a = &params.arch;
    let mut out = String::new();
    let kind = match a.kind {
        PolicyKind::NoAction => "no-action",
        PolicyKind::Linear => "linear",
        PolicyKind::Mlp => "mlp",
    };
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "kind {kind}");
    let _ = writeln!(out, "obs_dim {}", a.obs_dim);
    let _ = writeln!(out, "act_dim {}", a.act_dim);
    if a.kind == PolicyKind::Mlp {
        let hidden: Vec<String> = a.hidden.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
    }
    let _ = writeln!(out, "recurrent {}", a.recurrent);
    match a.output {
        OutputMap::Identity => {
            let _ = writeln!(out, "output identity");
        }
        OutputMap::Tanh => {
            let _ = writeln!(out, "output tanh");
            let _ = writeln!(out, "action_low {}", fmt_list(&a.action_low));
            let _ = writeln!(out, "action_high {}", fmt_list(&a.action_high));
        }
    }
    let _ = writeln!(out, "gaussian {}", a.gaussian);
    let mut off = 0;
    for t in a.tensors() {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "tensor {} {}", t.name, dims.join(" "));
        let row = *t.shape.last().unwrap_or(&1);
        for chunk in params.values[off..off + t.len()].chunks(row.max(1)) {
            let _ = writeln!(out, "{}", fmt_list(chunk));
        }
        off += t.len();
    }
    out.push_str("end\n");
    out
}

/// Write atomically (temp file in the same directory, then rename).
pub fn save_weights(params: &PolicyParams, path: &Path) -> Result<()> {
    crate::write_atomic(path, write_weights(params).as_bytes())
}

pub fn load_weights(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_weights(&text, &path.display().to_string())
}

struct Parser<'a> {
    origin: &'a str,
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.origin.to_string(),
            line,
            message: message.into(),
        }
    }

    fn last_line(&self) -> usize {
        self.lines.last().map_or(1, |l| l.0)
    }

    fn peek(&self) -> Option<&(usize, Vec<&'a str>)> {
        self.lines.get(self.pos)
    }
}

fn parse_num<T: std::str::FromStr>(p: &Parser<'_>, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| p.err(line, format!("cannot parse {what} from `{tok}`")))
}

fn parse_f64(p: &Parser<'_>, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = parse_num(p, line, tok, "a number")?;
    if !v.is_finite() {
        return Err(p.err(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

/// Parse the text of a weight file; `origin` names it in error messages.
pub fn parse_weights(text: &str, origin: &str) -> Result<PolicyParams> {
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            (
                i + 1,
                l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>(),
            )
        })
        .filter(|(_, toks)| !toks.is_empty())
        .collect();
    let mut p = Parser { origin, lines, pos: 0 };

    let (line, head) = p.peek().cloned().ok_or_else(|| p.err(1, "empty weight file"))?;
    if head.len() != 2 || head[0] != MAGIC {
        return Err(p.err(line, format!("expected header `{MAGIC} {VERSION}`")));
    }
    let version: u32 = parse_num(&p, line, head[1], "a version")?;
    if version != VERSION {
        return Err(p.err(line, format!("unsupported format version {version}")));
    }
    p.pos += 1;

    let mut kind = None;
    let mut obs_dim = None;
    let mut act_dim = None;
    let mut hidden = Vec::new();
    let mut recurrent = 0;
    let mut output = OutputMap::Identity;
    let mut low = Vec::new();
    let mut high = Vec::new();
    let mut gaussian = false;
    while let Some((line, toks)) = p.peek().cloned() {
        if toks[0] == "tensor" || toks[0] == "end" {
            break;
        }
        p.pos += 1;
        let args = &toks[1..];
        let single = |p: &Parser<'_>| -> Result<&str> {
            match args {
                [v] => Ok(v),
                _ => Err(p.err(line, format!("`{}` takes exactly one value", toks[0]))),
            }
        };
        match toks[0] {
            "kind" => {
                kind = Some(match single(&p)? {
                    "no-action" => PolicyKind::NoAction,
                    "linear" => PolicyKind::Linear,
                    "mlp" => PolicyKind::Mlp,
                    other => return Err(p.err(line, format!("unknown policy kind `{other}`"))),
                })
            }
            "obs_dim" => obs_dim = Some(parse_num(&p, line, single(&p)?, "obs_dim")?),
            "act_dim" => act_dim = Some(parse_num(&p, line, single(&p)?, "act_dim")?),
            "hidden" => {
                hidden = args
                    .iter()
                    .map(|t| parse_num(&p, line, t, "a layer width"))
                    .collect::<Result<_>>()?
            }
            "recurrent" => recurrent = parse_num(&p, line, single(&p)?, "recurrent")?,
            "output" => {
                output = match single(&p)? {
                    "identity" => OutputMap::Identity,
                    "tanh" => OutputMap::Tanh,
                    other => return Err(p.err(line, format!("unknown output map `{other}`"))),
                }
            }
            "action_low" => low = args.iter().map(|t| parse_f64(&p, line, t)).collect::<Result<_>>()?,
            "action_high" => high = args.iter().map(|t| parse_f64(&p, line, t)).collect::<Result<_>>()?,
            "gaussian" => gaussian = parse_num(&p, line, single(&p)?, "a boolean")?,
            other => return Err(p.err(line, format!("unknown header key `{other}`"))),
        }
    }
    let at = p.peek().map_or(p.last_line(), |l| l.0);
    let kind = kind.ok_or_else(|| p.err(at, "missing `kind`"))?;
    let obs_dim = obs_dim.ok_or_else(|| p.err(at, "missing `obs_dim`"))?;
    let act_dim = act_dim.ok_or_else(|| p.err(at, "missing `act_dim`"))?;
    let arch = PolicyArch {
        kind,
        obs_dim,
        act_dim,
        hidden,
        output,
        action_low: low,
        action_high: high,
        gaussian,
        recurrent,
    };
    arch.validate().map_err(|e| p.err(at, e.to_string()))?;

    let specs = arch.tensors();
    let expected_total = arch.param_count();
    let mut values = Vec::with_capacity(expected_total);
    let mut next_spec = 0;
    loop {
        let Some((line, toks)) = p.peek().cloned() else {
            return Err(p.err(p.last_line(), "missing `end`"));
        };
        p.pos += 1;
        if toks[0] == "end" {
            if toks.len() != 1 {
                return Err(p.err(line, "unexpected tokens after `end`"));
            }
            break;
        }
        if toks[0] != "tensor" || toks.len() < 2 {
            return Err(p.err(line, "expected `tensor <name> <dims...>` or `end`"));
        }
        let name = toks[1];
        let shape: Vec<usize> = toks[2..]
            .iter()
            .map(|t| parse_num(&p, line, t, "a dimension"))
            .collect::<Result<_>>()?;
        let Some(spec) = specs.get(next_spec) else {
            return Err(p.err(line, format!("unexpected tensor `{name}`")));
        };
        if spec.name != name {
            return Err(p.err(line, format!("expected tensor `{}`, found `{name}`", spec.name)));
        }
        if spec.shape != shape {
            return Err(p.err(
                line,
                format!("tensor `{name}` should have shape {:?}, found {:?}", spec.shape, shape),
            ));
        }
        next_spec += 1;
        let start = values.len();
        while let Some((line, toks)) = p.peek().cloned() {
            if toks[0] == "tensor" || toks[0] == "end" {
                break;
            }
            p.pos += 1;
            for t in toks {
                values.push(parse_f64(&p, line, t)?);
            }
        }
        if values.len() - start != spec.len() {
            return Err(Error::ParamCount {
                expected: spec.len(),
                found: values.len() - start,
            });
        }
    }
    if p.pos != p.lines.len() {
        return Err(p.err(p.lines[p.pos].0, "content after `end`"));
    }
    if values.len() != expected_total {
        return Err(Error::ParamCount {
            expected: expected_total,
            found: values.len(),
        });
    }
    PolicyParams::new(arch, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::System;

    #[test]
    fn hand_written_linear_policy() {
        let text = "chaoscope-policy 1\nkind linear\nobs_dim 1\nact_dim 1\n\
                    tensor out.w 1 1\n0.5\ntensor out.b 1\n-0.25\nend\n";
        let p = parse_weights(text, "inline").unwrap();
        let (a, _, _) = p.act_mean(&[2.0], &[]).unwrap();
        assert_eq!(a, vec![0.5 * 2.0 - 0.25]);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let sys = System::logistic_control();
        let p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[5, 3], true), 11, -0.7).unwrap();
        let first = write_weights(&p);
        let back = parse_weights(&first, "x").unwrap();
        assert_eq!(back, p);
        assert_eq!(write_weights(&back), first);
    }

    #[test]
    fn wrong_count_names_both_numbers() {
        let text = "chaoscope-policy 1\nkind linear\nobs_dim 2\nact_dim 1\n\
                    tensor out.w 1 2\n0.5\ntensor out.b 1\n0\nend\n";
        let err = parse_weights(text, "w").unwrap_err();
        assert!(matches!(err, Error::ParamCount { expected: 2, found: 1 }), "{err}");
        assert!(err.to_string().contains("expected 2, found 1"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "chaoscope-policy 1\nkind linear\nobs_dim 1\nact_dim 1\n\
                    tensor out.w 1 1\nabc\ntensor out.b 1\n0\nend\n";
        match parse_weights(text, "f.txt").unwrap_err() {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 6);
                assert_eq!(path, "f.txt");
            }
            e => panic!("unexpected {e}"),
        }
        let bad_head = parse_weights("policy 1\n", "h").unwrap_err();
        assert!(matches!(bad_head, Error::Parse { line: 1, .. }));
    }
}
