//! Line-oriented descriptor grammar.
//!
//! ```text
//! name <text>                                   optional
//! input <channels>                              optional, default 3
//! conv <id> <src> <c_in> <c_out> <k> <s> <d> [bias]
//! c3 <id> <src> <c_in> <c_out> <n>
//! sppf <id> <src> <c_in> <c_out> <k>
//! dilated <id> <src> <c>
//! upsample <id> <src> <factor>
//! concat <id> <src1,src2,...>
//! detect <id> <src> <head_index> <outputs_per_location>
//! ```
//!
//! `#` starts a comment. `<src>` is an earlier layer id or `input`. For every kind
//! except `concat`, `<id> <src>` may be omitted together: the layer then takes the
//! next free id and reads the previous layer (or the input, for the first layer).

use std::collections::HashSet;
use std::path::Path;

use super::{ArchDescriptor, ArchError, LayerId, LayerKind, LayerSpec, Result, Source};
use crate::headmatch::Head;

struct Line<'a> {
    number: usize,
    tokens: Vec<&'a str>,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> ArchError {
        ArchError::Syntax {
            line: self.number,
            message: message.into(),
        }
    }

    fn int(&self, token: &str, what: &str) -> Result<u32> {
        token
            .parse()
            .map_err(|_| self.err(format!("expected integer {what}, found '{token}'")))
    }
}

pub fn load_descriptor(path: &Path) -> Result<ArchDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| ArchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("descriptor");
    parse_descriptor(&text, name)
}

/// Parse descriptor text. `default_name` is used unless a `name` line is present.
pub fn parse_descriptor(text: &str, default_name: &str) -> Result<ArchDescriptor> {
    let mut name = default_name.to_string();
    let mut input_channels = 3;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut defined: HashSet<LayerId> = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let line = Line {
            number: i + 1,
            tokens: content.split_whitespace().collect(),
        };
        let Some((&keyword, args)) = line.tokens.split_first() else {
            continue;
        };
        match keyword {
            "name" => {
                if args.is_empty() {
                    return Err(line.err("name needs a value"));
                }
                name = args.join(" ");
                continue;
            }
            "input" => {
                let [c] = args else {
                    return Err(line.err("usage: input <channels>"));
                };
                if !layers.is_empty() {
                    return Err(line.err("input must precede all layers"));
                }
                input_channels = line.int(c, "channels")?;
                continue;
            }
            _ => {}
        }

        let (arity, usage) = match keyword {
            "conv" => (5, "conv <id> <src> <c_in> <c_out> <k> <s> <d> [bias]"),
            "c3" => (3, "c3 <id> <src> <c_in> <c_out> <n>"),
            "sppf" => (3, "sppf <id> <src> <c_in> <c_out> <k>"),
            "dilated" => (1, "dilated <id> <src> <c>"),
            "upsample" => (1, "upsample <id> <src> <factor>"),
            "detect" => (2, "detect <id> <src> <head_index> <outputs_per_location>"),
            "concat" => (0, "concat <id> <src1,src2,...>"),
            other => return Err(line.err(format!("unknown layer kind '{other}'"))),
        };

        let (id, sources, params): (LayerId, Vec<Source>, &[&str]) = if keyword == "concat" {
            let [id, list] = args else {
                return Err(line.err(format!("usage: {usage}")));
            };
            let id = line.int(id, "layer id")?;
            let mut sources = Vec::new();
            for tok in list.split(',').filter(|t| !t.is_empty()) {
                sources.push(resolve(&line, tok, id, &defined)?);
            }
            (id, sources, &[])
        } else {
            let bias_flag = keyword == "conv" && args.last() == Some(&"bias");
            let n = args.len() - usize::from(bias_flag);
            if n == arity + 2 {
                let id = line.int(args[0], "layer id")?;
                let src = resolve(&line, args[1], id, &defined)?;
                (id, vec![src], &args[2..])
            } else if n == arity {
                let id = layers.iter().map(|l| l.id + 1).max().unwrap_or(0);
                let src = layers.last().map_or(Source::Input, |l| Source::Layer(l.id));
                (id, vec![src], args)
            } else {
                return Err(line.err(format!("usage: {usage}")));
            }
        };

        let num = |k: usize, what: &str| line.int(params[k], what);
        let kind = match keyword {
            "conv" => {
                let bias = match params.get(5) {
                    None => false,
                    Some(&"bias") => true,
                    Some(other) => {
                        return Err(line.err(format!("expected 'bias', found '{other}'")))
                    }
                };
                LayerKind::Conv {
                    c_in: num(0, "c_in")?,
                    c_out: num(1, "c_out")?,
                    k: num(2, "kernel")?,
                    s: num(3, "stride")?,
                    d: num(4, "dilation")?,
                    bias,
                }
            }
            "c3" => LayerKind::C3 {
                c_in: num(0, "c_in")?,
                c_out: num(1, "c_out")?,
                n: num(2, "repeat count")?,
            },
            "sppf" => LayerKind::Sppf {
                c_in: num(0, "c_in")?,
                c_out: num(1, "c_out")?,
                k: num(2, "pool size")?,
            },
            "dilated" => LayerKind::Dilated {
                c: num(0, "channels")?,
            },
            "upsample" => LayerKind::Upsample {
                factor: num(0, "factor")?,
            },
            "detect" => LayerKind::Detect {
                head: params[0]
                    .parse::<Head>()
                    .map_err(|e| line.err(e.to_string()))?,
                outputs: num(1, "outputs per location")?,
            },
            _ => LayerKind::Concat,
        };

        if !defined.insert(id) {
            return Err(ArchError::DuplicateId(id));
        }
        layers.push(LayerSpec::new(id, sources, kind));
    }

    ArchDescriptor::new(name, input_channels, layers)
}

fn resolve(
    line: &Line<'_>,
    token: &str,
    id: LayerId,
    defined: &HashSet<LayerId>,
) -> Result<Source> {
    if token == "input" {
        return Ok(Source::Input);
    }
    let src = line.int(token, "source id")?;
    if defined.contains(&src) {
        Ok(Source::Layer(src))
    } else {
        Err(ArchError::ForwardReference {
            line: line.number,
            id,
            src,
        })
    }
}
