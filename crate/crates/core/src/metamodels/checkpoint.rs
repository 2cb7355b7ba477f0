//! Text checkpoints:
//!
//! ```text
//! metaepi-model v1 variant=<tag>
//! param <name> <d1>x<d2>
//! <row-major floats, comma separated>
//! ...
//! ```
//!
//! Hyper-parameters are stored as scalar blocks named `hyper.<name>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::backbone::{Backbone, Linear};
use super::model::{MetaModel, Variant};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::taskgen::parse_header;

pub const MODEL_HEADER: &str = "metaepi-model v1";

fn write_block(out: &mut String, name: &str, t: &Tensor) {
    let shape = if t.shape().is_empty() {
        "scalar".to_string()
    } else {
        t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    };
    let _ = writeln!(out, "param {name} {shape}");
    let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
    let _ = writeln!(out, "{}", values.join(","));
}

pub fn model_to_text(model: &MetaModel) -> String {
    let mut out = format!("{MODEL_HEADER} variant={}\n", model.variant().tag());
    for (name, p) in model.param_names().iter().zip(model.params()) {
        write_block(&mut out, name, p);
    }
    let scalar = |v: f64| Tensor::scalar(v).expect("finite hyper-parameter");
    match model {
        MetaModel::ProtoNet { .. } => {}
        MetaModel::MatchNet { temperature, .. } => write_block(&mut out, "hyper.temperature", &scalar(*temperature)),
        MetaModel::FoMaml(m) => {
            write_block(&mut out, "hyper.inner_lr", &scalar(m.inner_lr));
            write_block(&mut out, "hyper.inner_steps", &scalar(m.inner_steps as f64));
        }
    }
    out
}

pub fn model_from_text(text: &str) -> Result<MetaModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty checkpoint".into(),
    })?;
    let fields = parse_header(header, MODEL_HEADER, 1)?;
    let tag = fields
        .iter()
        .find(|(k, _)| k == "variant")
        .map(|(_, v)| v.as_str())
        .ok_or(Error::Parse {
            line: 1,
            msg: "missing variant".into(),
        })?;
    let variant = Variant::from_tag(tag)?;

    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    while let Some((i, line)) = lines.next() {
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let mut parts = line.split_whitespace();
        if parts.next() != Some("param") {
            return Err(perr(i, format!("expected `param`, got `{line}`")));
        }
        let name = parts.next().ok_or_else(|| perr(i, "missing name".into()))?.to_string();
        let shape_str = parts.next().ok_or_else(|| perr(i, "missing shape".into()))?;
        let shape: Vec<usize> = if shape_str == "scalar" {
            Vec::new()
        } else {
            shape_str
                .split('x')
                .map(|d| d.parse().map_err(|e| perr(i, format!("shape: {e}"))))
                .collect::<Result<_>>()?
        };
        let (j, values) = lines.next().ok_or_else(|| perr(i, format!("block {name} has no values")))?;
        let data = values
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| perr(j, format!("value: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        blocks.insert(name, Tensor::new(shape, data)?);
    }

    let mut take = |name: &str| -> Result<Tensor> {
        blocks.remove(name).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing block {name}"),
        })
    };
    let mut layers = Vec::new();
    let mut i = 0;
    loop {
        let w = format!("backbone.{i}.weight");
        let Ok(weight) = take(&w) else { break };
        layers.push(Linear::new(weight, take(&format!("backbone.{i}.bias"))?)?);
        i += 1;
    }
    let backbone = Backbone::from_layers(layers)?;
    match variant {
        Variant::ProtoNet => Ok(MetaModel::protonet(backbone)),
        Variant::MatchNet => MetaModel::matchnet(backbone, take("hyper.temperature")?.item()),
        Variant::FoMaml => {
            let head = Linear::new(take("head.weight")?, take("head.bias")?)?;
            let lr = take("hyper.inner_lr")?.item();
            let steps = take("hyper.inner_steps")?.item();
            MetaModel::fomaml(backbone, head, lr, steps as usize)
        }
    }
}

pub fn save_model(model: &MetaModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_text(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MetaModel> {
    model_from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metamodels::ModelConfig;
    use crate::taskgen::RngStream;

    #[test]
    fn round_trip_every_variant() {
        for v in Variant::ALL {
            let model = ModelConfig::new(v).build(5, 3, &RngStream::new(1)).unwrap();
            let text = model_to_text(&model);
            assert!(text.starts_with(&format!("metaepi-model v1 variant={}\n", v.tag())));
            let back = model_from_text(&text).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let model = ModelConfig::new(Variant::ProtoNet).build(2, 2, &RngStream::new(1)).unwrap();
        let text = model_to_text(&model).replacen("v1", "v9", 1);
        assert!(matches!(model_from_text(&text), Err(Error::Version(_))));
    }
}
