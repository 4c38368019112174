use std::collections::HashMap;

use log::warn;

use super::{Activation, ConvSpec, LayerSpec, NetworkModel, PoolSpec};
use crate::error::{Error, Result};
use crate::tensor::Shape;

struct Section {
    name: String,
    line: usize,
    options: Vec<(String, String, usize)>,
}

impl Section {
    fn take(&mut self) -> Options {
        let mut map = HashMap::new();
        for (k, v, line) in self.options.drain(..) {
            map.insert(k, (v, line, false));
        }
        Options { section: self.name.clone(), line: self.line, map }
    }
}

struct Options {
    section: String,
    line: usize,
    map: HashMap<String, (String, usize, bool)>,
}

impl Options {
    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.get_mut(key).map(|(v, line, used)| {
            *used = true;
            (v.clone(), *line)
        })
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Config { line, msg: format!("{key}={v} is not a non-negative integer") }),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize(key)?.unwrap_or(default))
    }

    fn required(&mut self, key: &str) -> Result<usize> {
        self.usize(key)?.ok_or_else(|| Error::Config {
            line: self.line,
            msg: format!("[{}] is missing required key '{key}'", self.section),
        })
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        Ok(self.usize_or(key, 0)? != 0)
    }

    fn activation(&mut self) -> Result<Activation> {
        match self.raw("activation") {
            None => Ok(Activation::Linear),
            Some((v, line)) => v.parse().map_err(|msg| Error::Config { line, msg }),
        }
    }

    fn positive(&self, key: &str, v: usize) -> Result<usize> {
        if v == 0 {
            return Err(Error::Config { line: self.line, msg: format!("[{}] {key} must be >= 1", self.section) });
        }
        Ok(v)
    }

    fn warn_unused(&self) {
        let mut unused: Vec<_> = self.map.iter().filter(|(_, (_, _, used))| !used).collect();
        unused.sort_by_key(|(_, (_, line, _))| *line);
        for (k, (_, line, _)) in unused {
            warn!("line {line}: ignoring unknown key '{k}' in [{}]", self.section);
        }
    }
}

/// Parses a Darknet-style network description into a weightless model.
///
/// Whitespace inside a line is ignored and `#`/`;` start comment lines, as
/// in Darknet. The first section must be `[net]` (or `[network]`) and carry
/// `height`, `width` and `channels`.
pub fn parse_config(text: &str) -> Result<NetworkModel> {
    let mut sections: Vec<Section> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("unterminated section header '{raw}'") })?;
            sections.push(Section { name: name.to_ascii_lowercase(), line: line_no, options: Vec::new() });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config { line: line_no, msg: format!("expected key=value, got '{}'", raw.trim()) });
        };
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config { line: line_no, msg: format!("expected key=value, got '{}'", raw.trim()) });
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::Config { line: line_no, msg: "option before any [section]".into() })?;
        section.options.push((key.to_string(), value.to_string(), line_no));
    }

    let mut iter = sections.into_iter();
    let mut net = iter.next().ok_or_else(|| Error::Config { line: 0, msg: "empty network description".into() })?;
    if net.name != "net" && net.name != "network" {
        return Err(Error::Config { line: net.line, msg: format!("first section must be [net], got [{}]", net.name) });
    }
    let mut opts = net.take();
    let height = opts.required("height")?;
    let width = opts.required("width")?;
    let channels = opts.required("channels")?;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Config { line: net.line, msg: "input dimensions must be positive".into() });
    }
    // training-only keys of [net] are expected and not worth a warning
    let input = Shape::new(channels, height, width);

    let mut model = NetworkModel::new(input, [])?;
    let mut shape = input;
    for mut section in iter {
        let line = section.line;
        let mut opts = section.take();
        let spec = match section.name.as_str() {
            "convolutional" | "conv" => {
                let filters = opts.required("filters")?;
                let size = opts.usize_or("size", 1)?;
                let stride = opts.usize_or("stride", 1)?;
                let pad = opts.flag("pad")?;
                let explicit = opts.usize("padding")?;
                let groups = opts.usize_or("groups", 1)?;
                let batch_normalize = opts.flag("batch_normalize")?;
                let activation = opts.activation()?;
                let padding = match explicit {
                    Some(p) => p,
                    None if pad => size / 2,
                    None => 0,
                };
                LayerSpec::Convolutional(ConvSpec {
                    filters: opts.positive("filters", filters)?,
                    size: opts.positive("size", size)?,
                    stride: opts.positive("stride", stride)?,
                    padding,
                    groups: opts.positive("groups", groups)?,
                    batch_normalize,
                    activation,
                })
            }
            "maxpool" | "max" => {
                let stride = opts.usize_or("stride", 1)?;
                let size = opts.usize_or("size", stride)?;
                let size = opts.positive("size", size)?;
                let padding = opts.usize_or("padding", size - 1)?;
                LayerSpec::MaxPool(PoolSpec { size, stride: opts.positive("stride", stride)?, padding })
            }
            "avgpool" | "avg" => LayerSpec::AvgPool,
            "connected" | "conn" => {
                let outputs = opts.required("output")?;
                let activation = opts.activation()?;
                if opts.flag("batch_normalize")? {
                    return Err(Error::Config { line, msg: "batch_normalize on [connected] is not supported".into() });
                }
                LayerSpec::Connected { outputs: opts.positive("output", outputs)?, activation }
            }
            "softmax" | "soft" => {
                if opts.usize_or("groups", 1)? != 1 {
                    return Err(Error::Config { line, msg: "grouped softmax is not supported".into() });
                }
                LayerSpec::Softmax
            }
            // identity at inference time
            "dropout" | "cost" => {
                warn!("line {line}: skipping [{}] (no-op at inference)", section.name);
                continue;
            }
            other => return Err(Error::UnsupportedLayer(other.to_string())),
        };
        opts.warn_unused();
        if let LayerSpec::Convolutional(c) = &spec {
            if !shape.channels.is_multiple_of(c.groups) {
                return Err(Error::Config {
                    line,
                    msg: format!("groups={} does not divide {} input channels", c.groups, shape.channels),
                });
            }
        }
        let output = spec.output_shape(shape).map_err(|e| Error::Config { line, msg: e.to_string() })?;
        model.layers.push(super::Layer { spec, input: shape, output, weights: None });
        shape = output;
    }
    Ok(model)
}

/// Renders `model` as a network description that [`parse_config`] reads
/// back to the same layer stack.
pub fn format_config(model: &NetworkModel) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let i = model.input;
    let _ = writeln!(s, "[net]\nheight={}\nwidth={}\nchannels={}", i.height, i.width, i.channels);
    for layer in &model.layers {
        s.push('\n');
        let _ = match &layer.spec {
            LayerSpec::Convolutional(c) => writeln!(
                s,
                "[convolutional]\nbatch_normalize={}\nfilters={}\nsize={}\nstride={}\npadding={}\ngroups={}\nactivation={}",
                u8::from(c.batch_normalize),
                c.filters,
                c.size,
                c.stride,
                c.padding,
                c.groups,
                c.activation
            ),
            LayerSpec::MaxPool(p) => writeln!(s, "[maxpool]\nsize={}\nstride={}\npadding={}", p.size, p.stride, p.padding),
            LayerSpec::AvgPool => writeln!(s, "[avgpool]"),
            LayerSpec::Connected { outputs, activation } => {
                writeln!(s, "[connected]\noutput={outputs}\nactivation={activation}")
            }
            LayerSpec::Softmax => writeln!(s, "[softmax]"),
        };
    }
    s
}
