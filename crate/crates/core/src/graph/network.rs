use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Graph,
    Grid { rows: usize, cols: usize },
}

/// Nodes, road segments and the derived symmetric 0/1 adjacency.
///
/// Edge costs are kept but not used by the adjacency, which binarizes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    node_count: usize,
    edges: Vec<Edge>,
    layout: Layout,
    adjacency: Tensor,
}

impl RoadNetwork {
    pub fn new(node_count: usize, edges: Vec<Edge>, layout: Layout) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Data("road network needs at least one node".into()));
        }
        if let Layout::Grid { rows, cols } = layout {
            if rows * cols != node_count {
                return Err(Error::Data(format!(
                    "grid {rows}×{cols} does not match {node_count} nodes"
                )));
            }
        }
        let adjacency = build_adjacency(node_count, &edges, layout)?;
        Ok(RoadNetwork {
            node_count,
            edges,
            layout,
            adjacency,
        })
    }

    /// Path graph `0 – 1 – … – n-1` with unit costs.
    pub fn path(n: usize) -> Result<Self> {
        let edges = (1..n)
            .map(|i| Edge {
                src: i - 1,
                dst: i,
                cost: 1.0,
            })
            .collect();
        RoadNetwork::new(n, edges, Layout::Graph)
    }

    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        RoadNetwork::new(rows * cols, Vec::new(), Layout::Grid { rows, cols })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }
}

/// Binary symmetric adjacency. Graph layout: `A[i][j] = A[j][i] = 1` per
/// edge, self-loops dropped. Grid layout: 4-neighborhood on the lattice.
pub fn build_adjacency(n: usize, edges: &[Edge], layout: Layout) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[n, n]);
    match layout {
        Layout::Graph => {
            for (line, e) in edges.iter().enumerate() {
                if e.src >= n || e.dst >= n {
                    return Err(Error::Data(format!(
                        "edge {line} ({}, {}) references a node outside 0..{n}",
                        e.src, e.dst
                    )));
                }
                if e.src != e.dst {
                    a.set(&[e.src, e.dst], 1.0);
                    a.set(&[e.dst, e.src], 1.0);
                }
            }
        }
        Layout::Grid { rows, cols } => {
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    if c + 1 < cols {
                        a.set(&[i, i + 1], 1.0);
                        a.set(&[i + 1, i], 1.0);
                    }
                    if r + 1 < rows {
                        a.set(&[i, i + cols], 1.0);
                        a.set(&[i + cols, i], 1.0);
                    }
                }
            }
        }
    }
    Ok(a)
}

/// `Δ = I − D^{-1/2} A D^{-1/2}`; isolated nodes keep an identity row.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2("normalized_laplacian")?;
    if n != m {
        return Err(Error::dim(format!("adjacency must be square, got {:?}", a.shape())));
    }
    for i in 0..n {
        for j in 0..i {
            if a.get(&[i, j]) != a.get(&[j, i]) {
                return Err(Error::Contract(format!(
                    "adjacency not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("adjacency has negative entries".into()));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| a.get(&[i, j])).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a.data()[k] * inv_sqrt[j]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_and_empty() {
        let net = RoadNetwork::new(2, vec![Edge { src: 0, dst: 1, cost: 3.5 }], Layout::Graph).unwrap();
        assert_eq!(net.adjacency().data(), &[0.0, 1.0, 1.0, 0.0]);
        let empty = RoadNetwork::new(3, vec![], Layout::Graph).unwrap();
        assert!(empty.adjacency().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_edge_is_data_error() {
        let err = RoadNetwork::new(2, vec![Edge { src: 0, dst: 5, cost: 1.0 }], Layout::Graph);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn grid_corners_have_two_neighbors() {
        let net = RoadNetwork::grid(2, 2).unwrap();
        // By hand: 0-1, 0-2, 1-3, 2-3.
        let expect = [[0., 1., 1., 0.], [1., 0., 0., 1.], [1., 0., 0., 1.], [0., 1., 1., 0.]];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(net.adjacency().get(&[i, j]), expect[i][j]);
            }
        }
        assert!(RoadNetwork::new(5, vec![], Layout::Grid { rows: 2, cols: 2 }).is_err());
    }

    #[test]
    fn laplacian_closed_forms() {
        let p2 = RoadNetwork::path(2).unwrap();
        let d = normalized_laplacian(p2.adjacency()).unwrap();
        assert_eq!(d.data(), &[1.0, -1.0, -1.0, 1.0]);
        let iso = normalized_laplacian(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(iso, Tensor::eye(3));
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(matches!(normalized_laplacian(&a), Err(Error::Contract(_))));
    }
}
