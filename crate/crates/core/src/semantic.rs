//! Semantic branch: the emotion word tree, per-class similarity graphs over
//! lexicon embeddings, a two-layer graph-convolution encoder with
//! class-guided attention pooling, and the assembled semantic representation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Shape};
use crate::config::SemanticPool;
use crate::data::lexicon::{LexiconClass, LexiconSet};
use crate::data::NUM_CLASSES;
use crate::error::Error;
use crate::nn::{self, LinearParams};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

/// Two-level word hierarchy: a root, one node per emotion class, and the
/// class's lexicon words as leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionTree {
    pub classes: [TreeClass; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeClass {
    pub class_word: String,
    pub words: Vec<String>,
    pub embedding_dim: usize,
}

pub fn build_emotion_tree(lexicons: &LexiconSet) -> Result<EmotionTree> {
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for class in &lexicons.classes {
        if class.entries.is_empty() {
            return Err(Error::contract(format!("class '{}' has no lexicon words", class.name)));
        }
        let mut words = Vec::with_capacity(class.entries.len());
        for e in &class.entries {
            if words.contains(&e.word) {
                return Err(Error::contract(format!(
                    "class '{}' has duplicate word '{}'",
                    class.name, e.word
                )));
            }
            words.push(e.word.clone());
        }
        classes.push(TreeClass {
            class_word: class.class_word.clone(),
            words,
            embedding_dim: lexicons.dim,
        });
    }
    let classes: [TreeClass; NUM_CLASSES] =
        classes.try_into().map_err(|_| Error::contract("class count"))?;
    Ok(EmotionTree { classes })
}

impl EmotionTree {
    /// Text rendering for inspection: root, classes, leaves.
    pub fn render(&self) -> String {
        let mut out = String::from("Emotions\n");
        for (i, class) in self.classes.iter().enumerate() {
            let last_class = i + 1 == self.classes.len();
            let branch = if last_class { "`-- " } else { "|-- " };
            let pipe = if last_class { "    " } else { "|   " };
            out.push_str(&format!(
                "{branch}{} ({} words, {}-dim embeddings)\n",
                class.class_word,
                class.words.len(),
                class.embedding_dim
            ));
            for (j, word) in class.words.iter().enumerate() {
                let leaf = if j + 1 == class.words.len() { "`-- " } else { "|-- " };
                out.push_str(&format!("{pipe}{leaf}{word}\n"));
            }
        }
        out
    }
}

/// One class's fully connected similarity graph: lexicon embeddings then the
/// class embedding as the last node, with the raw and degree-normalized
/// adjacency matrices.
#[derive(Clone, Debug)]
pub struct ClassGraph {
    /// Node count (words + 1 class node).
    pub n: usize,
    pub dim: usize,
    /// `n x dim`, row-major; class embedding is the last row.
    pub nodes: Vec<f64>,
    /// Raw affinity: cosine similarity clamped below at 0, diagonal 1.
    pub adjacency: Vec<f64>,
    /// `D^{-1/2} A D^{-1/2}`.
    pub normalized: Vec<f64>,
}

pub fn build_class_graph(class: &LexiconClass) -> Result<ClassGraph> {
    let dim = class.class_embedding.len();
    let n = class.entries.len() + 1;
    let mut nodes = Vec::with_capacity(n * dim);
    for e in &class.entries {
        nodes.extend_from_slice(&e.embedding);
    }
    nodes.extend_from_slice(&class.class_embedding);

    let norms: Vec<f64> = (0..n)
        .map(|i| nodes[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x <= 1e-12) {
        return Err(Error::DegenerateVector { op: "build_class_graph", norm: norms[i] });
    }
    let mut adjacency = vec![0.0f64; n * n];
    for i in 0..n {
        adjacency[i * n + i] = 1.0;
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| nodes[i * dim + k] * nodes[j * dim + k]).sum();
            let affinity = (dot / (norms[i] * norms[j])).max(0.0);
            adjacency[i * n + j] = affinity;
            adjacency[j * n + i] = affinity;
        }
    }
    let inv_sqrt_degree: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| adjacency[i * n + j]).sum();
            1.0 / d.sqrt()
        })
        .collect();
    let mut normalized = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            normalized[i * n + j] = inv_sqrt_degree[i] * adjacency[i * n + j] * inv_sqrt_degree[j];
        }
    }
    Ok(ClassGraph { n, dim, nodes, adjacency, normalized })
}

pub fn build_class_graphs(lexicons: &LexiconSet) -> Result<[ClassGraph; NUM_CLASSES]> {
    let graphs: Vec<ClassGraph> = lexicons
        .classes
        .iter()
        .map(build_class_graph)
        .collect::<Result<_>>()?;
    graphs.try_into().map_err(|_| Error::contract("class count"))
}

/// Trainable parameters of the semantic branch.
#[derive(Clone, Copy, Debug)]
pub struct SemanticParams {
    /// First graph convolution, `embed_dim -> gcn_width` (no bias).
    pub gcn_w1: ParamId,
    /// Second graph convolution, `gcn_width -> gcn_width`.
    pub gcn_w2: ParamId,
    /// Projection of the three concatenated class vectors to `hidden`.
    pub proj: LinearParams,
}

impl SemanticParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        embed_dim: usize,
        gcn_width: usize,
        hidden: usize,
        pool: SemanticPool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let class_width = match pool {
            SemanticPool::Sum => gcn_width,
            SemanticPool::Concat => 2 * gcn_width,
        };
        SemanticParams {
            gcn_w1: store.glorot(&format!("{name}.gcn1.weight"), embed_dim, gcn_width, rng),
            gcn_w2: store.glorot(&format!("{name}.gcn2.weight"), gcn_width, gcn_width, rng),
            proj: LinearParams::init(
                store,
                &format!("{name}.proj"),
                NUM_CLASSES * class_width,
                hidden,
                rng,
            ),
        }
    }
}

/// Outcome of encoding one class graph.
pub struct ClassEncoding {
    /// Pooled class vector, `1 x gcn_width` (or double that when pooling by
    /// concatenation).
    pub f_c: NodeId,
    /// Attention weights over the graph nodes, `1 x n`.
    pub attention: NodeId,
}

/// Refine a class graph with two graph convolutions (dropout between them in
/// train mode), pool the node matrix by class-guided attention, add the
/// pooled summary back onto every node, then reduce with mean and max.
///
/// The attention query is the raw class embedding when the convolution width
/// equals the embedding width; otherwise the widths are incompatible and the
/// convolved class node (last row) serves as the query.
pub fn encode_class_semantics<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    graph: &ClassGraph,
    p: &SemanticParams,
    pool: SemanticPool,
) -> Result<ClassEncoding> {
    let nodes: Vec<S> = graph.nodes.iter().map(|&v| S::of(v)).collect();
    let v_c = g.constant(Shape::of(graph.n, graph.dim), nodes);
    let a_hat: Vec<S> = graph.normalized.iter().map(|&v| S::of(v)).collect();
    let a_hat = nn::adjacency_constant(g, &a_hat, graph.n)?;

    let w1 = bound.node(p.gcn_w1);
    let w2 = bound.node(p.gcn_w2);
    let h1 = nn::gcn_layer(g, v_c, a_hat, w1)?;
    let h1 = g.dropout(h1)?;
    let h = nn::gcn_layer(g, h1, a_hat, w2)?;

    let gcn_width = g.shape(h).cols;
    let query = if gcn_width == graph.dim {
        let raw: Vec<S> = graph.nodes[(graph.n - 1) * graph.dim..]
            .iter()
            .map(|&v| S::of(v))
            .collect();
        g.constant(Shape::of(1, graph.dim), raw)
    } else {
        g.slice_rows(h, graph.n - 1, 1)?
    };
    let query_t = g.transpose(query)?;
    let scores = g.matmul(h, query_t)?;
    let scores_row = g.transpose(scores)?;
    let attention = g.softmax_rows(scores_row)?;
    let summary = g.matmul(attention, h)?;
    let h_ec = g.broadcast_add_row(h, summary)?;

    let mean = g.mean_rows(h_ec)?;
    let max = g.max_rows(h_ec)?;
    let f_c = match pool {
        SemanticPool::Sum => g.add(mean, max)?,
        SemanticPool::Concat => g.concat_cols(&[mean, max])?,
    };
    Ok(ClassEncoding { f_c, attention })
}

/// Concatenate the three class vectors in fixed order (positive, neutral,
/// negative) and project to the shared hidden width. One such vector exists
/// per model state; it does not vary across samples.
pub fn assemble_semantic_rep<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    class_vectors: &[NodeId; NUM_CLASSES],
    p: &SemanticParams,
) -> Result<NodeId> {
    let cat = g.concat_cols(class_vectors)?;
    nn::linear(g, bound, cat, &p.proj)
}

/// Per-sample semantic vector for a ground-truth label: the matching class
/// vector placed in its own slot of the three-slot concatenation (other
/// slots zero) and sent through the same projection head.
pub fn class_semantic_for_label<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    class_vectors: &[NodeId; NUM_CLASSES],
    label: u8,
    p: &SemanticParams,
) -> Result<NodeId> {
    if label as usize >= NUM_CLASSES {
        return Err(Error::contract(format!("label {label} outside 0..=2")));
    }
    let width = g.shape(class_vectors[0]).cols;
    let mut slots = Vec::with_capacity(NUM_CLASSES);
    for (c, &vec) in class_vectors.iter().enumerate() {
        if c == label as usize {
            slots.push(vec);
        } else {
            slots.push(g.constant(Shape::of(1, width), vec![S::zero(); width]));
        }
    }
    let cat = g.concat_cols(&slots)?;
    nn::linear(g, bound, cat, &p.proj)
}
