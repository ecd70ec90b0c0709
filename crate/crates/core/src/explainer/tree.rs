use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub children: Option<(usize, usize)>,
    pub depth: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary hierarchy over a `rows x cols` region grid. Every internal node is
/// bisected along its longer axis (rows on ties); the first half gets the
/// smaller share. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct PartitionTree {
    cols: usize,
    nodes: Vec<TreeNode>,
}

impl PartitionTree {
    pub fn build(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(Error::Config(format!(
                "degenerate partition grid {rows}x{cols}"
            )));
        }
        let mut tree = Self {
            cols,
            nodes: Vec::new(),
        };
        tree.split(0..rows, 0..cols, 0);
        Ok(tree)
    }

    fn split(&mut self, rows: Range<usize>, cols: Range<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            rows: rows.clone(),
            cols: cols.clone(),
            children: None,
            depth,
        });
        if rows.len() * cols.len() > 1 {
            let (a, b) = if rows.len() >= cols.len() {
                let mid = rows.start + rows.len() / 2;
                (
                    self.split(rows.start..mid, cols.clone(), depth + 1),
                    self.split(mid..rows.end, cols, depth + 1),
                )
            } else {
                let mid = cols.start + cols.len() / 2;
                (
                    self.split(rows.clone(), cols.start..mid, depth + 1),
                    self.split(rows, mid..cols.end, depth + 1),
                )
            };
            self.nodes[id].children = Some((a, b));
        }
        id
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Row-major region indices covered by a node.
    pub fn regions(&self, id: usize) -> Vec<usize> {
        let n = &self.nodes[id];
        n.rows
            .clone()
            .flat_map(|r| n.cols.clone().map(move |c| r * self.cols + c))
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Score evaluations needed to refine every node in every context:
    /// two for the root's endpoints, plus two per (internal node, context)
    /// pair, with `2^depth` contexts at each depth.
    pub fn full_refinement_cost(&self) -> usize {
        2 + self
            .nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| 2 << n.depth)
            .sum::<usize>()
    }
}
