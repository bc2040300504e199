//! Text checkpoints.
//!
//! ```text
//! cnn v1
//! input 28 28 1
//! conv 8 3 3 stride 1 valid
//! batchnorm 8 eps 1e-5 momentum 0.1
//! relu
//! maxpool 2 2
//! flatten 1352
//! fc 1352 400
//! relu
//! tap
//! dropout 0.5
//! fc 400 3
//! softmax
//! state trained
//! param conv.weight 72
//! <72 values on one line>
//! ...
//! ```
//!
//! Values are written with 17 significant digits and read back exactly.

use super::layers::BatchNorm2d;
use super::net::{ConvNetArch, ConvNetModel, TENSOR_NAMES};
use super::ConvNetError;
use crate::svm::fmt17;

const BUFFER_NAMES: [&str; 2] = ["bn.running_mean", "bn.running_var"];

pub fn to_text(model: &ConvNetModel) -> String {
    let a = model.arch;
    let bn = &model.bn;
    let flat = a.flatten_len().expect("validated at construction");
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line("cnn v1".into());
    line(format!("input {} {} {}", a.height, a.width, a.channels));
    line(format!(
        "conv {} {k} {k} stride 1 valid",
        a.filters,
        k = a.kernel
    ));
    line(format!(
        "batchnorm {} eps {} momentum {}",
        a.filters,
        fmt17(bn.eps),
        fmt17(bn.momentum)
    ));
    line("relu".into());
    line("maxpool 2 2".into());
    line(format!("flatten {flat}"));
    line(format!("fc {flat} {}", a.hidden));
    line("relu".into());
    line("tap".into());
    line(format!("dropout {}", fmt17(model.dropout)));
    line(format!("fc {} {}", a.hidden, a.classes));
    line("softmax".into());
    line(format!(
        "state {}",
        if model.is_trained() {
            "trained"
        } else {
            "untrained"
        }
    ));
    let tensors = model.tensors();
    let blocks = TENSOR_NAMES.iter().zip(tensors).chain(
        BUFFER_NAMES
            .iter()
            .zip([&bn.running_mean[..], &bn.running_var[..]]),
    );
    for (name, values) in blocks {
        line(format!("param {name} {}", values.len()));
        line(
            values
                .iter()
                .map(|&v| fmt17(v))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self) -> Result<Vec<&'a str>, ConvNetError> {
        let (i, l) = self.inner.next().ok_or(ConvNetError::Checkpoint {
            line: self.last + 1,
            reason: "unexpected end of file".into(),
        })?;
        self.last = i + 1;
        Ok(l.split_whitespace().collect())
    }

    fn err(&self, reason: impl Into<String>) -> ConvNetError {
        ConvNetError::Checkpoint {
            line: self.last,
            reason: reason.into(),
        }
    }

    fn expect(&mut self, keyword: &str, arity: usize) -> Result<Vec<&'a str>, ConvNetError> {
        let t = self.next_tokens()?;
        if t.first() != Some(&keyword) || t.len() != arity + 1 {
            return Err(self.err(format!("expected `{keyword}` with {arity} arguments")));
        }
        Ok(t[1..].to_vec())
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, ConvNetError> {
        s.parse().map_err(|_| self.err(format!("bad number {s:?}")))
    }
}

pub fn from_text(text: &str) -> Result<ConvNetModel, ConvNetError> {
    let mut l = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if l.next_tokens()? != ["cnn", "v1"] {
        return Err(l.err("expected header `cnn v1`"));
    }
    let t = l.expect("input", 3)?;
    let (height, width, channels) = (l.num(t[0])?, l.num(t[1])?, l.num(t[2])?);
    let t = l.expect("conv", 6)?;
    let (filters, kh, kw): (usize, usize, usize) = (l.num(t[0])?, l.num(t[1])?, l.num(t[2])?);
    if kh != kw || t[3..] != ["stride", "1", "valid"] {
        return Err(l.err("only square, stride-1, valid convolutions are supported"));
    }
    let t = l.expect("batchnorm", 5)?;
    let bn_channels: usize = l.num(t[0])?;
    let (eps, momentum): (f64, f64) = (l.num(t[2])?, l.num(t[4])?);
    l.expect("relu", 0)?;
    if l.expect("maxpool", 2)? != ["2", "2"] {
        return Err(l.err("only 2x2 pooling is supported"));
    }
    let t = l.expect("flatten", 1)?;
    let flat: usize = l.num(t[0])?;
    let t = l.expect("fc", 2)?;
    let (fc1_in, hidden): (usize, usize) = (l.num(t[0])?, l.num(t[1])?);
    l.expect("relu", 0)?;
    l.expect("tap", 0)?;
    let t = l.expect("dropout", 1)?;
    let dropout: f64 = l.num(t[0])?;
    let t = l.expect("fc", 2)?;
    let (fc2_in, classes): (usize, usize) = (l.num(t[0])?, l.num(t[1])?);
    l.expect("softmax", 0)?;
    let trained = match l.expect("state", 1)?[0] {
        "trained" => true,
        "untrained" => false,
        other => return Err(l.err(format!("unknown state {other:?}"))),
    };

    let arch = ConvNetArch {
        height,
        width,
        channels,
        filters,
        kernel: kh,
        hidden,
        classes,
    };
    arch.validate()?;
    if bn_channels != filters || fc1_in != flat || arch.flatten_len()? != flat || fc2_in != hidden {
        return Err(l.err("layer manifest is not shape-consistent"));
    }
    let mut model = ConvNetModel::new(arch, dropout, 0)?;
    model.bn = BatchNorm2d {
        eps,
        momentum,
        ..BatchNorm2d::new(filters)
    };
    model.trained = trained;

    let names = TENSOR_NAMES.iter().chain(BUFFER_NAMES.iter());
    for (idx, name) in names.enumerate() {
        let t = l.expect("param", 2)?;
        if t[0] != *name {
            return Err(l.err(format!("expected parameter {name}, found {}", t[0])));
        }
        let len: usize = l.num(t[1])?;
        let values = l
            .next_tokens()?
            .into_iter()
            .map(|s| l.num::<f64>(s))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != len {
            return Err(l.err(format!(
                "{name}: expected {len} values, got {}",
                values.len()
            )));
        }
        let dst: &mut [f64] = match idx {
            0..=7 => model.tensors_mut()[idx],
            8 => &mut model.bn.running_mean,
            _ => &mut model.bn.running_var,
        };
        if dst.len() != len {
            return Err(l.err(format!(
                "{name}: expected {} values for this shape",
                dst.len()
            )));
        }
        dst.copy_from_slice(&values);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let arch = ConvNetArch {
            hidden: 7,
            ..ConvNetArch::new(9, 8, 1, 3)
        };
        let mut m = ConvNetModel::new(arch, 0.25, 4).unwrap();
        m.bn.running_mean = (0..8).map(|i| i as f64 / 3.0).collect();
        m.mark_trained();
        let text = to_text(&m);
        assert!(text.starts_with("cnn v1\ninput 9 8 1\n"));
        assert_eq!(from_text(&text).unwrap(), m);
    }

    #[test]
    fn rejects_bad_manifest() {
        let m = ConvNetModel::new(
            ConvNetArch {
                hidden: 4,
                ..ConvNetArch::new(6, 6, 1, 2)
            },
            0.5,
            0,
        )
        .unwrap();
        let text = to_text(&m).replace("flatten 32", "flatten 33");
        assert!(matches!(
            from_text(&text),
            Err(ConvNetError::Checkpoint { .. })
        ));
        assert!(from_text("cnn v2\n").is_err());
    }
}
