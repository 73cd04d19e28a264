//! Datasets, networks and model bundles stored in the tensor container.
//!
//! Unsigned identifiers and seeds are stored bit-for-bit as `i64`.

use std::path::Path;

use midlevel_core::datamodel::{Labels, LabelSpec, Mode, MotifOracle, PatchId, PersonSample, Split, Stamp};
use midlevel_core::detectors::{ClusterDetector, LdaModel};
use midlevel_core::embednet::{ConvSpec, EmbedNetwork, NetArch};
use midlevel_core::encoder::LinearClassifier;
use midlevel_core::image::Image;
use midlevel_core::mining::{AssociationPattern, PatternCluster};
use midlevel_core::patchgrid::GridConfig;
use midlevel_core::pipeline::{Exemplar, ModelBundle};

use crate::container::{Container, ContainerError, Result};

pub const DATASET_KIND: &str = "dataset";
pub const NETWORK_KIND: &str = "network";
pub const BUNDLE_KIND: &str = "bundle";

fn bad(msg: impl Into<String>) -> ContainerError {
    ContainerError::Format(msg.into())
}

fn core_err(e: midlevel_core::Error) -> ContainerError {
    ContainerError::Format(e.to_string())
}

fn to_usize(v: i64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| bad(format!("negative {what}")))
}

fn rows<'a, T>(shape: &[usize], data: &'a [T], cols: usize, name: &str) -> Result<std::slice::ChunksExact<'a, T>> {
    if shape.len() != 2 || shape[1] != cols {
        return Err(bad(format!("entry `{name}` must have {cols} columns")));
    }
    Ok(data.chunks_exact(cols.max(1)))
}

fn put_spec(c: &mut Container, spec: &LabelSpec) {
    c.put_text("spec.mode", spec.mode().as_str());
    c.put_text("spec.classes", spec.class_names().join("\n"));
}

fn get_spec(c: &Container) -> Result<LabelSpec> {
    let mode = match c.text("spec.mode")? {
        "action" => Mode::Action,
        "attribute" => Mode::Attribute,
        other => return Err(bad(format!("unknown mode `{other}`"))),
    };
    let names = c.text("spec.classes")?.split('\n').map(String::from).collect();
    LabelSpec::new(mode, names).map_err(core_err)
}

fn split_code(code: i64) -> Result<Split> {
    u8::try_from(code)
        .ok()
        .and_then(Split::from_code)
        .ok_or_else(|| bad(format!("unknown split code {code}")))
}

pub fn dataset_container(samples: &[PersonSample], spec: &LabelSpec, oracle: &MotifOracle) -> Container {
    let n = samples.len();
    let width = match spec.mode() {
        Mode::Action => 1,
        Mode::Attribute => spec.num_classes(),
    };
    let mut c = Container::new(DATASET_KIND);
    put_spec(&mut c, spec);
    c.put_i64("ids", &[n], samples.iter().map(|s| i64::from(s.id)).collect());
    c.put_i64("splits", &[n], samples.iter().map(|s| i64::from(s.split.code())).collect());
    c.put_i64(
        "shapes",
        &[n, 2],
        samples
            .iter()
            .flat_map(|s| [s.image.channels() as i64, s.image.side() as i64])
            .collect(),
    );
    let pixels: Vec<f64> = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    c.put_f64("pixels", &[pixels.len()], pixels);
    let labels = samples
        .iter()
        .flat_map(|s| match &s.labels {
            Labels::Action(k) => vec![*k as i64],
            Labels::Attribute(v) => v.iter().map(|&l| i64::from(l)).collect(),
        })
        .collect();
    c.put_i64("labels", &[n, width], labels);
    c.put_i64("oracle.box_side", &[1], vec![oracle.box_side as i64]);
    let stamps: Vec<i64> = oracle
        .stamps
        .iter()
        .flat_map(|(&sample, list)| {
            list.iter().flat_map(move |st| {
                [
                    i64::from(sample),
                    i64::from(st.category),
                    i64::from(st.index),
                    st.row as i64,
                    st.col as i64,
                    st.side as i64,
                ]
            })
        })
        .collect();
    c.put_i64("oracle.stamps", &[stamps.len() / 6, 6], stamps);
    c
}

pub fn dataset_from_container(c: &Container) -> Result<(Vec<PersonSample>, LabelSpec, MotifOracle)> {
    let spec = get_spec(c)?;
    let (_, ids) = c.i64s("ids")?;
    let (_, splits) = c.i64s("splits")?;
    let (shape_dims, shapes) = c.i64s("shapes")?;
    let (_, pixels) = c.f64s("pixels")?;
    let (label_dims, labels) = c.i64s("labels")?;
    let n = ids.len();
    if splits.len() != n || shape_dims.first() != Some(&n) || label_dims.first() != Some(&n) {
        return Err(bad("sample arrays disagree in length"));
    }
    let width = label_dims.get(1).copied().unwrap_or(0);
    let mut label_rows = rows(label_dims, labels, width, "labels")?;
    let mut offset = 0;
    let mut samples = Vec::with_capacity(n);
    for (i, shape) in rows(shape_dims, shapes, 2, "shapes")?.enumerate() {
        let (ch, side) = (to_usize(shape[0], "channels")?, to_usize(shape[1], "side")?);
        let len = ch * side * side;
        let data = pixels
            .get(offset..offset + len)
            .ok_or_else(|| bad("pixel array is too short"))?
            .to_vec();
        offset += len;
        let row = label_rows.next().unwrap_or(&[]);
        let labels = match spec.mode() {
            Mode::Action => Labels::Action(to_usize(row[0], "label")?),
            Mode::Attribute => Labels::Attribute(
                row.iter()
                    .map(|&v| i8::try_from(v).map_err(|_| bad("attribute label out of range")))
                    .collect::<Result<_>>()?,
            ),
        };
        let sample = PersonSample {
            id: u32::try_from(ids[i]).map_err(|_| bad("sample id out of range"))?,
            image: Image::new(ch, side, data).map_err(core_err)?,
            labels,
            split: split_code(splits[i])?,
        };
        sample.validate(&spec).map_err(core_err)?;
        samples.push(sample);
    }
    if offset != pixels.len() {
        return Err(bad("pixel array has trailing values"));
    }
    let (_, box_side) = c.i64s("oracle.box_side")?;
    let mut oracle = MotifOracle {
        box_side: to_usize(*box_side.first().ok_or_else(|| bad("missing box side"))?, "box side")?,
        stamps: Default::default(),
    };
    let (stamp_dims, stamps) = c.i64s("oracle.stamps")?;
    for s in rows(stamp_dims, stamps, 6, "oracle.stamps")? {
        let sample = u32::try_from(s[0]).map_err(|_| bad("stamp sample out of range"))?;
        oracle.stamps.entry(sample).or_insert_with(Vec::new).push(Stamp {
            category: u16::try_from(s[1]).map_err(|_| bad("stamp category out of range"))?,
            index: u16::try_from(s[2]).map_err(|_| bad("stamp index out of range"))?,
            row: to_usize(s[3], "stamp row")?,
            col: to_usize(s[4], "stamp col")?,
            side: to_usize(s[5], "stamp side")?,
        });
    }
    Ok((samples, spec, oracle))
}

pub fn save_dataset(path: &Path, samples: &[PersonSample], spec: &LabelSpec, oracle: &MotifOracle) -> Result<()> {
    dataset_container(samples, spec, oracle).save(path)
}

pub fn load_dataset(path: &Path) -> Result<(Vec<PersonSample>, LabelSpec, MotifOracle)> {
    dataset_from_container(&Container::load(path, DATASET_KIND)?)
}

fn arch_code(arch: &NetArch) -> Vec<i64> {
    let mut v = vec![
        arch.in_channels as i64,
        arch.patch_side as i64,
        arch.context_side as i64,
        arch.outputs as i64,
        arch.embed_layer as i64,
        arch.patch_stream.len() as i64,
        arch.context_stream.len() as i64,
        arch.hidden.len() as i64,
    ];
    for c in arch.patch_stream.iter().chain(&arch.context_stream) {
        v.extend([c.kernel as i64, c.out_channels as i64, c.stride as i64, i64::from(c.pool)]);
    }
    v.extend(arch.hidden.iter().map(|&h| h as i64));
    v
}

fn arch_decode(v: &[i64]) -> Result<NetArch> {
    let u = |i: usize| -> Result<usize> { to_usize(*v.get(i).ok_or_else(|| bad("architecture code is short"))?, "arch field") };
    let (np, nc, nh) = (u(5)?, u(6)?, u(7)?);
    if v.len() != 8 + 4 * (np + nc) + nh {
        return Err(bad("architecture code has the wrong length"));
    }
    let conv = |k: usize| -> Result<ConvSpec> {
        let b = 8 + 4 * k;
        Ok(ConvSpec::new(u(b)?, u(b + 1)?, u(b + 2)?, v[b + 3] != 0))
    };
    Ok(NetArch {
        in_channels: u(0)?,
        patch_side: u(1)?,
        context_side: u(2)?,
        outputs: u(3)?,
        embed_layer: u(4)?,
        patch_stream: (0..np).map(conv).collect::<Result<_>>()?,
        context_stream: (np..np + nc).map(conv).collect::<Result<_>>()?,
        hidden: (0..nh).map(|i| u(8 + 4 * (np + nc) + i)).collect::<Result<_>>()?,
    })
}

pub fn put_network(c: &mut Container, prefix: &str, net: &EmbedNetwork) {
    let code = arch_code(net.arch());
    c.put_i64(format!("{prefix}.arch"), &[code.len()], code);
    c.put_f64(format!("{prefix}.params"), &[net.param_count()], net.params().to_vec());
    c.put_i64(format!("{prefix}.seed"), &[1], vec![net.seed() as i64]);
}

pub fn get_network(c: &Container, prefix: &str) -> Result<EmbedNetwork> {
    let arch = arch_decode(c.i64s(&format!("{prefix}.arch"))?.1)?;
    let params = c.f64s(&format!("{prefix}.params"))?.1.to_vec();
    let seed = *c.i64s(&format!("{prefix}.seed"))?.1.first().ok_or_else(|| bad("missing seed"))? as u64;
    EmbedNetwork::from_parts(arch, params, seed).map_err(core_err)
}

pub fn save_network(path: &Path, net: &EmbedNetwork) -> Result<()> {
    let mut c = Container::new(NETWORK_KIND);
    put_network(&mut c, "net", net);
    c.save(path)
}

pub fn load_network(path: &Path) -> Result<EmbedNetwork> {
    get_network(&Container::load(path, NETWORK_KIND)?, "net")
}

fn scalar_i64(c: &Container, name: &str) -> Result<i64> {
    c.i64s(name)?.1.first().copied().ok_or_else(|| bad(format!("entry `{name}` is empty")))
}

fn scalar_f64(c: &Container, name: &str) -> Result<f64> {
    c.f64s(name)?.1.first().copied().ok_or_else(|| bad(format!("entry `{name}` is empty")))
}

fn flatten_rows(rows: &[Vec<f64>], name: &str, c: &mut Container) {
    let width = rows.first().map_or(0, Vec::len);
    c.put_f64(name, &[rows.len(), width], rows.concat());
}

pub fn bundle_container(b: &ModelBundle) -> Container {
    let mut c = Container::new(BUNDLE_KIND);
    put_spec(&mut c, &b.spec);
    let mut grid = vec![b.grid.resize_side as i64, b.grid.stride as i64];
    grid.extend(b.grid.scales.iter().map(|&s| s as i64));
    c.put_i64("grid", &[grid.len()], grid);
    c.put_i64("context_stream", &[1], vec![i64::from(b.context_stream)]);
    put_network(&mut c, "holistic", &b.holistic);
    put_network(&mut c, "network", &b.network);

    let n = b.clusters.len();
    c.put_i64(
        "clusters.meta",
        &[n, 3],
        b.clusters
            .iter()
            .flat_map(|k| [i64::from(k.id), k.category as i64, k.members.len() as i64])
            .collect(),
    );
    let members: Vec<i64> = b.clusters.iter().flat_map(|k| k.members.iter().map(|m| m.0 as i64)).collect();
    c.put_i64("clusters.members", &[members.len()], members);
    let patterns: Vec<(usize, &AssociationPattern)> = b
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(i, k)| k.patterns.iter().map(move |p| (i, p)))
        .collect();
    c.put_i64(
        "patterns.meta",
        &[patterns.len(), 3],
        patterns
            .iter()
            .flat_map(|(i, p)| [*i as i64, p.target as i64, p.itemset.len() as i64])
            .collect(),
    );
    let items: Vec<i64> = patterns.iter().flat_map(|(_, p)| p.itemset.iter().map(|&x| i64::from(x))).collect();
    c.put_i64("patterns.items", &[items.len()], items);
    c.put_f64(
        "patterns.stats",
        &[patterns.len(), 2],
        patterns.iter().flat_map(|(_, p)| [p.support, p.confidence]).collect(),
    );

    c.put_i64(
        "detectors.cluster",
        &[b.detectors.len()],
        b.detectors.iter().map(|d| i64::from(d.model.cluster_id)).collect(),
    );
    let weights: Vec<Vec<f64>> = b.detectors.iter().map(|d| d.model.weights.clone()).collect();
    flatten_rows(&weights, "detectors.weights", &mut c);
    c.put_f64(
        "detectors.scalars",
        &[b.detectors.len(), 3],
        b.detectors
            .iter()
            .flat_map(|d| [d.model.bias, d.model.shrinkage, d.threshold])
            .collect(),
    );

    let k = &b.classifier;
    c.put_text("classifier.mode", k.mode.as_str());
    c.put_f64("classifier.mean", &[k.mean.len()], k.mean.clone());
    c.put_f64("classifier.inv_std", &[k.inv_std.len()], k.inv_std.clone());
    c.put_f64("classifier.weights", &[k.biases.len(), k.mean.len()], k.weights.clone());
    c.put_f64("classifier.biases", &[k.biases.len()], k.biases.clone());
    c.put_i64("classifier.trained", &[k.trained.len()], k.trained.iter().map(|&t| i64::from(t)).collect());
    c.put_f64("classifier.reg", &[1], vec![k.reg]);
    c.put_text("classifier.warnings", k.warnings.join("\n"));
    c.put_i64("classifier.warning_count", &[1], vec![k.warnings.len() as i64]);

    c.put_i64("iteration", &[1], vec![b.iteration as i64]);
    c.put_f64("validation_metric", &[1], vec![b.validation_metric]);
    c.put_i64(
        "exemplars.meta",
        &[b.exemplars.len(), 2],
        b.exemplars
            .iter()
            .flat_map(|e| [i64::from(e.cluster), e.patch.0 as i64])
            .collect(),
    );
    c.put_f64("exemplars.score", &[b.exemplars.len()], b.exemplars.iter().map(|e| e.score).collect());
    let pixels: Vec<Vec<f64>> = b.exemplars.iter().map(|e| e.pixels.clone()).collect();
    flatten_rows(&pixels, "exemplars.pixels", &mut c);
    c
}

fn cluster_id(v: i64) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad("cluster id out of range"))
}

pub fn bundle_from_container(c: &Container) -> Result<ModelBundle> {
    let spec = get_spec(c)?;
    let grid_code = c.i64s("grid")?.1;
    if grid_code.len() < 3 {
        return Err(bad("grid code is short"));
    }
    let grid = GridConfig {
        resize_side: to_usize(grid_code[0], "grid side")?,
        stride: to_usize(grid_code[1], "grid stride")?,
        scales: grid_code[2..].iter().map(|&s| to_usize(s, "grid scale")).collect::<Result<_>>()?,
    };

    let (meta_dims, meta) = c.i64s("clusters.meta")?;
    let members = c.i64s("clusters.members")?.1;
    let mut clusters = Vec::new();
    let mut offset = 0;
    for m in rows(meta_dims, meta, 3, "clusters.meta")? {
        let count = to_usize(m[2], "member count")?;
        let ids = members
            .get(offset..offset + count)
            .ok_or_else(|| bad("member array is too short"))?;
        offset += count;
        clusters.push(PatternCluster {
            id: cluster_id(m[0])?,
            category: to_usize(m[1], "category")?,
            patterns: Vec::new(),
            members: ids.iter().map(|&p| PatchId(p as u64)).collect(),
        });
    }
    let (pmeta_dims, pmeta) = c.i64s("patterns.meta")?;
    let items = c.i64s("patterns.items")?.1;
    let (stats_dims, stats) = c.f64s("patterns.stats")?;
    let mut item_offset = 0;
    for (m, s) in rows(pmeta_dims, pmeta, 3, "patterns.meta")?.zip(rows(stats_dims, stats, 2, "patterns.stats")?) {
        let len = to_usize(m[2], "itemset length")?;
        let itemset = items
            .get(item_offset..item_offset + len)
            .ok_or_else(|| bad("item array is too short"))?
            .iter()
            .map(|&x| u32::try_from(x).map_err(|_| bad("item out of range")))
            .collect::<Result<_>>()?;
        item_offset += len;
        let owner = clusters
            .get_mut(to_usize(m[0], "pattern owner")?)
            .ok_or_else(|| bad("pattern refers to a missing cluster"))?;
        owner.patterns.push(AssociationPattern {
            itemset,
            target: to_usize(m[1], "pattern target")?,
            support: s[0],
            confidence: s[1],
        });
    }

    let det_ids = c.i64s("detectors.cluster")?.1;
    let (w_dims, w) = c.f64s("detectors.weights")?;
    let (s_dims, scalars) = c.f64s("detectors.scalars")?;
    let dim = w_dims.get(1).copied().unwrap_or(0);
    let detectors = det_ids
        .iter()
        .zip(rows(w_dims, w, dim, "detectors.weights")?)
        .zip(rows(s_dims, scalars, 3, "detectors.scalars")?)
        .map(|((&id, weights), s)| {
            Ok(ClusterDetector {
                model: LdaModel {
                    cluster_id: cluster_id(id)?,
                    weights: weights.to_vec(),
                    bias: s[0],
                    shrinkage: s[1],
                },
                threshold: s[2],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if detectors.len() != det_ids.len() {
        return Err(bad("detector arrays disagree in length"));
    }

    let mode = match c.text("classifier.mode")? {
        "action" => Mode::Action,
        "attribute" => Mode::Attribute,
        other => return Err(bad(format!("unknown classifier mode `{other}`"))),
    };
    let warnings = match scalar_i64(c, "classifier.warning_count")? {
        0 => Vec::new(),
        _ => c.text("classifier.warnings")?.split('\n').map(String::from).collect(),
    };
    let classifier = LinearClassifier {
        mode,
        mean: c.f64s("classifier.mean")?.1.to_vec(),
        inv_std: c.f64s("classifier.inv_std")?.1.to_vec(),
        weights: c.f64s("classifier.weights")?.1.to_vec(),
        biases: c.f64s("classifier.biases")?.1.to_vec(),
        trained: c.i64s("classifier.trained")?.1.iter().map(|&t| t != 0).collect(),
        reg: scalar_f64(c, "classifier.reg")?,
        warnings,
    };

    let (em_dims, em) = c.i64s("exemplars.meta")?;
    let scores = c.f64s("exemplars.score")?.1;
    let (px_dims, px) = c.f64s("exemplars.pixels")?;
    let width = px_dims.get(1).copied().unwrap_or(0);
    let exemplars: Vec<Exemplar> = rows(em_dims, em, 2, "exemplars.meta")?
        .zip(scores)
        .zip(rows(px_dims, px, width, "exemplars.pixels")?)
        .map(|((m, &score), pixels)| {
            Ok(Exemplar {
                cluster: cluster_id(m[0])?,
                patch: PatchId(m[1] as u64),
                score,
                pixels: pixels.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    if exemplars.len() != scores.len() {
        return Err(bad("exemplar arrays disagree in length"));
    }

    Ok(ModelBundle {
        spec,
        grid,
        context_stream: scalar_i64(c, "context_stream")? != 0,
        holistic: get_network(c, "holistic")?,
        network: get_network(c, "network")?,
        clusters,
        detectors,
        classifier,
        iteration: to_usize(scalar_i64(c, "iteration")?, "iteration")?,
        validation_metric: scalar_f64(c, "validation_metric")?,
        exemplars,
    })
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    bundle_container(bundle).save(path)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    bundle_from_container(&Container::load(path, BUNDLE_KIND)?)
}
