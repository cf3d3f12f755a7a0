//! Instance formats and the planted-coloring generator.
//!
//! Two text formats are read:
//!
//! * DIMACS `p edge` (1-indexed, `c` comments). `k` is not part of the
//!   format and is supplied by the caller.
//! * The native edge list (0-indexed): a header line `n k [chi]`, then one
//!   `u v` line per edge, then one `a node color` line per anchor.
//!
//! Colorings are written as `node color` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Coloring, ConflictGraph};
use crate::rng;

/// A graph plus the optional chromatic number recorded in its header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub graph: ConflictGraph,
    pub planted_chromatic_number: Option<usize>,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| perr(line, format!("bad {what} `{tok}`")))
}

pub fn parse_dimacs(text: &str, k: usize) -> Result<ConflictGraph> {
    let mut n = None;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("p") => {
                if n.is_some() {
                    return Err(perr(line_no, "duplicate problem line"));
                }
                match toks.next() {
                    Some("edge") | Some("col") => {}
                    other => {
                        return Err(perr(line_no, format!("unsupported problem type {other:?}")))
                    }
                }
                n = Some(parse_num(toks.next(), line_no, "vertex count")?);
                parse_num(toks.next(), line_no, "edge count")?;
            }
            Some("e") => {
                let nodes = n.ok_or_else(|| perr(line_no, "edge before problem line"))?;
                let u = parse_num(toks.next(), line_no, "vertex")?;
                let v = parse_num(toks.next(), line_no, "vertex")?;
                for x in [u, v] {
                    if x == 0 || x > nodes {
                        return Err(perr(
                            line_no,
                            format!("vertex {x} out of range 1..={nodes}"),
                        ));
                    }
                }
                if u == v {
                    return Err(perr(line_no, format!("self-loop on vertex {u}")));
                }
                edges.push((u - 1, v - 1));
            }
            Some(tok) => return Err(perr(line_no, format!("unknown line type `{tok}`"))),
            None => {}
        }
    }
    let n = n.ok_or_else(|| perr(0, "missing problem line"))?;
    ConflictGraph::new(n, k, edges, [])
}

pub fn export_dimacs(g: &ConflictGraph) -> String {
    let mut out = format!("p edge {} {}\n", g.node_count(), g.edge_count());
    for &(u, v) in g.edges() {
        let _ = writeln!(out, "e {} {}", u + 1, v + 1);
    }
    out
}

pub fn export_edgelist(g: &ConflictGraph) -> String {
    write_instance(&Instance {
        graph: g.clone(),
        planted_chromatic_number: None,
    })
}

pub fn import_edgelist(text: &str) -> Result<ConflictGraph> {
    parse_instance(text).map(|i| i.graph)
}

pub fn write_instance(inst: &Instance) -> String {
    let g = &inst.graph;
    let mut out = match inst.planted_chromatic_number {
        Some(chi) => format!("{} {} {}\n", g.node_count(), g.k(), chi),
        None => format!("{} {}\n", g.node_count(), g.k()),
    };
    for &(u, v) in g.edges() {
        let _ = writeln!(out, "{u} {v}");
    }
    for (&node, &color) in g.anchors() {
        let _ = writeln!(out, "a {node} {color}");
    }
    out
}

pub fn parse_instance(text: &str) -> Result<Instance> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing header"))?;
    let mut toks = header.split_whitespace();
    let n = parse_num(toks.next(), hline, "node count")?;
    let k = parse_num(toks.next(), hline, "k")?;
    let chi = toks
        .next()
        .map(|t| parse_num(Some(t), hline, "chromatic number"))
        .transpose()?;
    if toks.next().is_some() {
        return Err(perr(hline, "trailing tokens in header"));
    }

    let mut edges = Vec::new();
    let mut anchors = Vec::new();
    for (line_no, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["a", node, color] => {
                let node = parse_num(Some(node), line_no, "anchor node")?;
                let color = parse_num(Some(color), line_no, "anchor color")?;
                if node >= n || color >= k {
                    return Err(perr(
                        line_no,
                        format!("anchor ({node}, {color}) out of range"),
                    ));
                }
                anchors.push((node, color));
            }
            [u, v] => {
                let u = parse_num(Some(u), line_no, "node")?;
                let v = parse_num(Some(v), line_no, "node")?;
                if u >= n || v >= n {
                    return Err(perr(
                        line_no,
                        format!("edge ({u}, {v}) out of range 0..{n}"),
                    ));
                }
                if u == v {
                    return Err(perr(line_no, format!("self-loop on node {u}")));
                }
                edges.push((u, v));
            }
            _ => return Err(perr(line_no, format!("malformed line `{line}`"))),
        }
    }
    Ok(Instance {
        graph: ConflictGraph::new(n, k, edges, anchors)?,
        planted_chromatic_number: chi,
    })
}

pub fn write_coloring(c: &Coloring) -> String {
    let mut out = String::with_capacity(c.len() * 6);
    for (v, col) in c.iter().enumerate() {
        let _ = writeln!(out, "{v} {col}");
    }
    out
}

pub fn parse_coloring(text: &str, node_count: usize) -> Result<Coloring> {
    let mut colors = vec![None; node_count];
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let v = parse_num(toks.next(), line_no, "node")?;
        let c = parse_num(toks.next(), line_no, "color")?;
        if v >= node_count {
            return Err(perr(line_no, format!("node {v} out of range")));
        }
        if colors[v].replace(c).is_some() {
            return Err(perr(line_no, format!("node {v} colored twice")));
        }
    }
    colors
        .into_iter()
        .enumerate()
        .map(|(v, c)| c.ok_or_else(|| perr(0, format!("node {v} has no color"))))
        .collect::<Result<Vec<_>>>()
        .map(Coloring::new)
}

/// Planted instance: `n` nodes split into `k` groups whose sizes differ by at
/// most one, each cross-group pair joined with probability `density`, plus a
/// `k`-clique through one node of every group so the chromatic number is
/// exactly `k`. Returns the planted coloring as witness.
pub fn generate_planted(
    n: usize,
    k: usize,
    density: f64,
    seed: u64,
) -> Result<(ConflictGraph, Coloring)> {
    let mut rng = rng::stream(seed, "planted", 0);
    generate_planted_with(n, k, density, &mut rng)
}

fn generate_planted_with(
    n: usize,
    k: usize,
    density: f64,
    rng: &mut impl Rng,
) -> Result<(ConflictGraph, Coloring)> {
    if k == 0 || n < k {
        return Err(Error::InvalidParameter(format!(
            "planted generator needs n >= k >= 1, got n = {n}, k = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidParameter(format!(
            "density {density} not in [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut group = vec![0; n];
    for (pos, &v) in order.iter().enumerate() {
        group[v] = pos % k;
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if group[u] != group[v] && rng.gen_bool(density) {
                edges.push((u, v));
            }
        }
    }
    // order[0..k] holds one node from each group
    for i in 0..k {
        for j in i + 1..k {
            edges.push((order[i], order[j]));
        }
    }
    Ok((ConflictGraph::new(n, k, edges, [])?, Coloring::new(group)))
}

/// Adds a clique on `size` distinct random nodes.
pub fn plant_clique(g: &ConflictGraph, size: usize, rng: &mut impl Rng) -> Result<ConflictGraph> {
    if size > g.node_count() {
        return Err(Error::InvalidParameter(format!(
            "cannot plant a {size}-clique in {} nodes",
            g.node_count()
        )));
    }
    let nodes: Vec<usize> = rand::seq::index::sample(rng, g.node_count(), size).into_vec();
    let mut edges = g.edges().to_vec();
    for (i, &u) in nodes.iter().enumerate() {
        for &v in &nodes[i + 1..] {
            edges.push((u, v));
        }
    }
    ConflictGraph::new(
        g.node_count(),
        g.k(),
        edges,
        g.anchors().iter().map(|(&n, &c)| (n, c)),
    )
}

/// Parameters for a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub k: usize,
    pub density: f64,
    pub seed: u64,
    /// Every `m`-th instance (index % m == m - 1) gets a `(k+1)`-clique
    /// planted and is therefore uncolorable. `0` disables.
    pub uncolorable_every: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 200,
            n_min: 20,
            n_max: 200,
            k: 3,
            density: 0.3,
            seed: 42,
            uncolorable_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub witness_path: Option<String>,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub density: f64,
    pub uncolorable: bool,
    pub planted_chromatic_number: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub instances: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub name: String,
    pub instance: Instance,
    /// Planted proper coloring; absent for deliberately uncolorable items.
    pub witness: Option<Coloring>,
}

fn instance_name(i: usize) -> String {
    format!("graph_{i:04}")
}

/// Rebuilds one instance from its manifest parameters.
pub fn regenerate(entry: &ManifestEntry) -> Result<(Instance, Option<Coloring>)> {
    let mut r = rng::stream(entry.seed, "planted", 0);
    let (g, witness) = generate_planted_with(entry.n, entry.k, entry.density, &mut r)?;
    if entry.uncolorable {
        let g = plant_clique(&g, entry.k + 1, &mut r)?;
        Ok((
            Instance {
                graph: g,
                planted_chromatic_number: None,
            },
            None,
        ))
    } else {
        Ok((
            Instance {
                graph: g,
                planted_chromatic_number: Some(entry.k),
            },
            Some(witness),
        ))
    }
}

pub fn corpus_manifest(spec: &CorpusSpec) -> Result<CorpusManifest> {
    if spec.n_min < spec.k || spec.n_max < spec.n_min {
        return Err(Error::InvalidParameter(format!(
            "node range [{}, {}] invalid for k = {}",
            spec.n_min, spec.n_max, spec.k
        )));
    }
    let instances = (0..spec.count)
        .map(|i| {
            let mut r = rng::stream(spec.seed, "corpus-size", i as u64);
            let n = r.gen_range(spec.n_min..=spec.n_max);
            let uncolorable = spec.uncolorable_every > 0
                && i % spec.uncolorable_every == spec.uncolorable_every - 1;
            let name = instance_name(i);
            ManifestEntry {
                path: format!("{name}.txt"),
                witness_path: (!uncolorable).then(|| format!("{name}.witness")),
                seed: rng::derive_seed(spec.seed, "corpus-graph", i as u64),
                n,
                k: spec.k,
                density: spec.density,
                uncolorable,
                planted_chromatic_number: (!uncolorable).then_some(spec.k),
            }
        })
        .collect();
    Ok(CorpusManifest {
        seed: spec.seed,
        spec: spec.clone(),
        instances,
    })
}

/// Generates a corpus in memory.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(CorpusManifest, Vec<CorpusItem>)> {
    let manifest = corpus_manifest(spec)?;
    let items = manifest
        .instances
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (instance, witness) = regenerate(e)?;
            Ok(CorpusItem {
                name: instance_name(i),
                instance,
                witness,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}

/// Writes `contents` to `path` through a temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, items: &[CorpusItem]) -> Result<()> {
    for (entry, item) in manifest.instances.iter().zip(items) {
        write_atomic(
            &dir.join(&entry.path),
            write_instance(&item.instance).as_bytes(),
        )?;
        if let (Some(wp), Some(w)) = (&entry.witness_path, &item.witness) {
            write_atomic(&dir.join(wp), write_coloring(w).as_bytes())?;
        }
    }
    let json = serde_json::to_string_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

/// Loads every instance listed in a corpus manifest.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let manifest = read_manifest(dir)?;
    manifest
        .instances
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let instance = parse_instance(&read_text(&path)?)?;
            let witness = match &e.witness_path {
                Some(wp) => Some(parse_coloring(
                    &read_text(&dir.join(wp))?,
                    instance.graph.node_count(),
                )?),
                None => None,
            };
            let name = Path::new(&e.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.path.clone());
            Ok(CorpusItem {
                name,
                instance,
                witness,
            })
        })
        .collect()
}

/// Reads a single instance file, choosing the format by extension
/// (`.col`/`.dimacs` are DIMACS, anything else is the native edge list).
pub fn load_instance(path: &Path, k: usize) -> Result<Instance> {
    let text = read_text(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if matches!(ext, "col" | "dimacs") {
        Ok(Instance {
            graph: parse_dimacs(&text, k)?,
            planted_chromatic_number: None,
        })
    } else {
        let inst = parse_instance(&text)?;
        if inst.graph.k() != k {
            return Ok(Instance {
                graph: inst.graph.with_k(k)?,
                ..inst
            });
        }
        Ok(inst)
    }
}
