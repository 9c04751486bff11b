use super::{Init, Session};
use crate::error::{Error, Result};
use crate::tensor::{Element, NodeId};

/// Stride that maps a source feature map onto a target resolution: the ratio
/// of the smaller spatial sides, which must be an exact integer.
pub fn compute_stride(source: (usize, usize), target: (usize, usize)) -> Result<usize> {
    let (s, t) = (source.0.min(source.1), target.0.min(target.1));
    if t == 0 {
        return Err(Error::Config("attention target has an empty spatial side".into()));
    }
    if s < t {
        return Err(Error::Config(format!(
            "attention source {source:?} is smaller than target {target:?}"
        )));
    }
    if s % t != 0 {
        return Err(Error::Config(format!(
            "attention source {source:?} and target {target:?} give non-integer stride {s}/{t}"
        )));
    }
    Ok(s / t)
}

/// Result of [`partial_attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: NodeId,
    /// Per-source weights, each `N × C`; they sum to one over sources.
    pub weights: Vec<NodeId>,
    pub strides: Vec<usize>,
}

/// Feature-wise attention from higher-resolution sources onto a target map.
///
/// Each source is brought to the target's shape by a strided 3×3 conv
/// (`{name}.proj{i}`). A shared affine map (`{name}.w`) turns each projected
/// map's channel means into logits, softmaxed across sources per channel.
/// The weighted sum of projections is concatenated with the target, mixed
/// by a 3×3 conv (`{name}.alias`) and added back onto the target, so zeroed
/// parameters leave the target unchanged.
pub fn partial_attention<T: Element>(
    s: &mut Session<'_, T>,
    sources: &[NodeId],
    target: NodeId,
    name: &str,
) -> Result<AttentionOutput> {
    if sources.is_empty() {
        return Err(Error::Config(format!("attention `{name}` has no sources")));
    }
    let (n, c, th, tw) = s.graph.value(target).dims4("partial_attention")?;
    let mut projected = Vec::with_capacity(sources.len());
    let mut strides = Vec::with_capacity(sources.len());
    for (i, &src) in sources.iter().enumerate() {
        let (_, _, h, w) = s.graph.value(src).dims4("partial_attention")?;
        let stride = compute_stride((h, w), (th, tw))?;
        if h.div_ceil(stride) != th || w.div_ceil(stride) != tw {
            return Err(Error::Config(format!(
                "attention `{name}` source {i} of {h}x{w} at stride {stride} does not land on {th}x{tw}"
            )));
        }
        projected.push(s.conv(src, &format!("{name}.proj{i}"), c, (3, 3), stride, true)?);
        strides.push(stride);
    }
    let w = s.param(&format!("{name}.w.weight"), &[c, c], Init::HeNormal { fan_in: c })?;
    let b = s.param(&format!("{name}.w.bias"), &[c], Init::Zeros)?;
    let mut logits = Vec::with_capacity(projected.len());
    for &p in &projected {
        let pooled = s.graph.global_avg_pool(p)?;
        let l = s.graph.dense(pooled, w, Some(b))?;
        logits.push(s.graph.reshape(l, &[n, c, 1])?);
    }
    let k = projected.len();
    let stacked = s.graph.concat(&logits, 2)?;
    let flat = s.graph.reshape(stacked, &[n * c, k])?;
    let soft = s.graph.softmax(flat)?;
    let soft = s.graph.reshape(soft, &[n, c, k])?;
    let mut weights = Vec::with_capacity(k);
    let mut attended = None;
    for (i, &p) in projected.iter().enumerate() {
        let a = s.graph.slice(soft, 2, i, 1)?;
        let a = s.graph.reshape(a, &[n, c])?;
        let term = s.graph.channel_scale(p, a)?;
        attended = Some(match attended {
            None => term,
            Some(acc) => s.graph.add(acc, term)?,
        });
        weights.push(a);
    }
    let attended = attended.expect("at least one source");
    let joined = s.graph.concat_channels(&[attended, target])?;
    let alias = s.conv(joined, &format!("{name}.alias"), c, (3, 3), 1, true)?;
    let output = s.graph.add(target, alias)?;
    Ok(AttentionOutput {
        output,
        weights,
        strides,
    })
}
