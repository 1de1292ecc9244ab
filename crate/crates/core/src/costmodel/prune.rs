use super::{ArchDescriptor, ArchError, LayerId, LayerKind, LayerSpec, Result, Source};
use crate::headmatch::HeadConfig;

/// Restrict `a` to the heads in `heads`.
///
/// Detect layers of absent heads are removed, then every layer that no surviving
/// detect layer depends on. A requested head without a detect layer is attached to
/// the last non-detect layer whose stride matches it, reusing the output width of
/// the existing detect layers.
pub fn prune_to_heads(a: &ArchDescriptor, heads: &HeadConfig) -> Result<ArchDescriptor> {
    let mut layers = a.layers().to_vec();
    let mut roots: Vec<LayerId> = Vec::new();
    let mut next_id = a.next_id();
    let outputs = layers.iter().find_map(|l| match l.kind {
        LayerKind::Detect { outputs, .. } => Some(outputs),
        _ => None,
    });

    for &head in heads.heads() {
        if let Some(&id) = a.head_map().get(&head) {
            roots.push(id);
            continue;
        }
        let anchor = a
            .layers()
            .iter()
            .rev()
            .find(|l| {
                !matches!(l.kind, LayerKind::Detect { .. })
                    && a.shape(l.id).is_some_and(|s| s.stride == head.stride())
            })
            .ok_or(ArchError::NoStageForHead(head))?;
        let outputs = outputs.ok_or(ArchError::NoStageForHead(head))?;
        layers.push(LayerSpec::new(
            next_id,
            vec![Source::Layer(anchor.id)],
            LayerKind::Detect { head, outputs },
        ));
        roots.push(next_id);
        next_id += 1;
    }

    let (name, input_channels, _) = a.clone().into_layers();
    let extended = ArchDescriptor::new(name.clone(), input_channels, layers)?;
    let live = extended.ancestors(&roots);
    let (_, _, layers) = extended.into_layers();
    ArchDescriptor::new(
        name,
        input_channels,
        layers
            .into_iter()
            .filter(|l| live.contains(&l.id))
            .collect(),
    )
}

/// Insert a `dilated` block right after layer `after`; every consumer of `after`
/// reads the block instead.
pub fn insert_dilated(a: &ArchDescriptor, after: LayerId) -> Result<ArchDescriptor> {
    let shape = a.shape(after).ok_or(ArchError::UnknownLayer(after))?;
    let new_id = a.next_id();
    let (name, input_channels, layers) = a.clone().into_layers();
    let mut out = Vec::with_capacity(layers.len() + 1);
    for mut layer in layers {
        for src in &mut layer.sources {
            if *src == Source::Layer(after) {
                *src = Source::Layer(new_id);
            }
        }
        let is_anchor = layer.id == after;
        out.push(layer);
        if is_anchor {
            out.push(LayerSpec::new(
                new_id,
                vec![Source::Layer(after)],
                LayerKind::Dilated { c: shape.channels },
            ));
        }
    }
    ArchDescriptor::new(name, input_channels, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{bundled_yolov5s, parse_descriptor};
    use crate::headmatch::{Head, HeadConfig};

    fn cfg(s: &str) -> HeadConfig {
        HeadConfig::parse(s).unwrap()
    }

    #[test]
    fn identity_prune() {
        let a = bundled_yolov5s();
        assert_eq!(prune_to_heads(&a, &cfg("H1-H5")).unwrap(), a);
    }

    #[test]
    fn prune_is_idempotent() {
        let a = bundled_yolov5s();
        let once = prune_to_heads(&a, &cfg("H2,H4")).unwrap();
        assert_eq!(prune_to_heads(&once, &cfg("H2,H4")).unwrap(), once);
    }

    #[test]
    fn dropping_heads_removes_dead_branches() {
        let a = bundled_yolov5s();
        let p = prune_to_heads(&a, &cfg("H1,H3")).unwrap();
        assert_eq!(
            p.head_map().keys().copied().collect::<Vec<_>>(),
            vec![Head::H1, Head::H3]
        );
        assert!(p.layers().len() < a.layers().len());
        assert!(p.param_count() < a.param_count());
    }

    #[test]
    fn missing_head_is_attached_at_matching_stride() {
        let a = parse_descriptor(
            "conv 0 input 3 8 3 2 1\nconv 1 0 8 16 3 2 1\ndetect 2 1 2 6\n",
            "t",
        )
        .unwrap();
        let p = prune_to_heads(&a, &cfg("H1")).unwrap();
        assert_eq!(p.layers().len(), 2);
        assert_eq!(p.param_count(), 27 * 8 + 8 * 6 + 6);
        assert_eq!(
            prune_to_heads(&a, &cfg("H3")),
            Err(ArchError::NoStageForHead(Head::H3))
        );
    }

    #[test]
    fn insert_dilated_rewires_consumers() {
        let a = parse_descriptor("conv 0 input 3 32 3 2 1\nconv 1 0 32 64 3 2 1\n", "t").unwrap();
        let b = insert_dilated(&a, 0).unwrap();
        assert_eq!(b.layers()[1].kind, LayerKind::Dilated { c: 32 });
        assert_eq!(b.layers()[2].sources, vec![Source::Layer(b.layers()[1].id)]);
        assert_eq!(b.param_count() - a.param_count(), 3 * 9 * 32 * 8 + 24 * 32);
    }
}
