//! Fixed-capacity FIFO of detached per-layer hidden states.
//!
//! Each layer keeps the most recent `capacity` positions of the states fed
//! into that layer's self-attention. Inserting detaches the states, so a later
//! segment can attend to them without gradients flowing back into the segment
//! that produced them.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CachedMemory {
    capacity: usize,
    d_model: usize,
    layers: Vec<Tensor>,
    detach: bool,
    /// Graph-resident copies of `layers` for the graph that last pushed.
    links: Option<(u64, Vec<Var>)>,
}

impl CachedMemory {
    pub fn new(n_layers: usize, capacity: usize, d_model: usize) -> Self {
        CachedMemory {
            capacity,
            d_model,
            layers: vec![Tensor::zeros(&[0, d_model]); n_layers],
            detach: true,
            links: None,
        }
    }

    /// Mutation hook for harness sanity checks: pushes keep the graph
    /// connection instead of detaching. Never enable in real training.
    pub fn without_detach(mut self) -> Self {
        self.detach = false;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Current number of cached positions (identical for every layer).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Empties every layer; used at the start of each utterance.
    pub fn reset(&mut self) {
        for t in &mut self.layers {
            *t = Tensor::zeros(&[0, self.d_model]);
        }
        self.links = None;
    }

    fn check_states(&self, shapes: &[&[usize]]) -> Result<usize> {
        if shapes.len() != self.layers.len() {
            return Err(Error::Structure(format!(
                "memory push got {} layer states, cache has {} layers",
                shapes.len(),
                self.layers.len()
            )));
        }
        let len = shapes.first().map_or(0, |s| s[0]);
        for s in shapes {
            if s.len() != 2 || s[1] != self.d_model || s[0] != len {
                return Err(Error::shape("memory push", &[len, self.d_model], s));
            }
        }
        Ok(len)
    }

    fn suffix_start(&self, new_len: usize) -> usize {
        (self.len() + new_len).saturating_sub(self.capacity)
    }

    /// Appends one segment of plain (already detached) states.
    pub fn push_values(&mut self, states: &[Tensor]) -> Result<()> {
        let shapes: Vec<&[usize]> = states.iter().map(Tensor::shape).collect();
        let new_len = self.check_states(&shapes)?;
        let start = self.suffix_start(new_len);
        for (buf, s) in self.layers.iter_mut().zip(states) {
            let mut data = buf.data().to_vec();
            data.extend_from_slice(s.data());
            let data = data[start * self.d_model..].to_vec();
            *buf = Tensor::new(&[data.len() / self.d_model, self.d_model], data)?;
        }
        self.links = None;
        Ok(())
    }

    /// Appends one segment of graph states, applying stop-gradient on entry.
    pub fn push(&mut self, g: &mut Graph, states: &[Var]) -> Result<()> {
        let shapes: Vec<Vec<usize>> = states.iter().map(|&v| g.shape(v).to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let new_len = self.check_states(&shape_refs)?;
        let start = self.suffix_start(new_len);
        let total = self.len() + new_len;
        let mut links = Vec::with_capacity(states.len());
        for (layer, &s) in states.iter().enumerate() {
            let new = if self.detach { g.stop_gradient(s) } else { s };
            let old = self.view(g, layer)?;
            let cat = g.concat_rows(&[old, new])?;
            let kept = g.slice_rows(cat, start, total)?;
            links.push(kept);
        }
        for (buf, &v) in self.layers.iter_mut().zip(&links) {
            *buf = g.value(v).clone();
        }
        self.links = Some((g.id(), links));
        Ok(())
    }

    /// Detached snapshot of one layer's memory.
    pub fn view_value(&self, layer: usize) -> Result<&Tensor> {
        self.layers.get(layer).ok_or(Error::Index {
            what: "memory layer",
            index: layer,
            len: self.layers.len(),
        })
    }

    /// One layer's memory as a node of `g`.
    pub fn view(&self, g: &mut Graph, layer: usize) -> Result<Var> {
        let value = self.view_value(layer)?;
        if let Some((gid, links)) = &self.links {
            if *gid == g.id() {
                return Ok(links[layer]);
            }
        }
        Ok(g.constant(value.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(len: usize, base: f64) -> Tensor {
        Tensor::new(&[len, 2], (0..len * 2).map(|i| base + i as f64).collect()).unwrap()
    }

    #[test]
    fn reset_is_idempotent_and_empty() {
        let mut m = CachedMemory::new(2, 4, 2);
        m.push_values(&[seg(3, 0.0), seg(3, 10.0)]).unwrap();
        m.reset();
        m.reset();
        assert_eq!(m.len(), 0);
        assert_eq!(m.view_value(1).unwrap().shape(), &[0, 2]);
    }

    #[test]
    fn capacity_four_keeps_latest_segment() {
        let mut m = CachedMemory::new(1, 4, 2);
        m.push_values(&[seg(4, 0.0)]).unwrap();
        m.push_values(&[seg(4, 100.0)]).unwrap();
        assert_eq!(m.view_value(0).unwrap(), &seg(4, 100.0));
    }

    #[test]
    fn under_capacity_keeps_everything_in_order() {
        let mut m = CachedMemory::new(1, 8, 2);
        m.push_values(&[seg(3, 0.0)]).unwrap();
        m.push_values(&[seg(3, 100.0)]).unwrap();
        let v = m.view_value(0).unwrap();
        assert_eq!(v.shape(), &[6, 2]);
        assert_eq!(&v.data()[..6], seg(3, 0.0).data());
        assert_eq!(&v.data()[6..], seg(3, 100.0).data());
    }

    #[test]
    fn overflow_keeps_suffix() {
        // capacity 5, push 3 then 4: old rows 2..3 followed by all new rows
        let mut m = CachedMemory::new(1, 5, 2);
        let a = seg(3, 0.0);
        let b = seg(4, 100.0);
        m.push_values(&[a.clone()]).unwrap();
        m.push_values(&[b.clone()]).unwrap();
        let v = m.view_value(0).unwrap();
        assert_eq!(v.shape(), &[5, 2]);
        assert_eq!(v.row(0), a.row(2));
        assert_eq!(&v.data()[2..], b.data());
    }

    #[test]
    fn layer_count_mismatch_is_structural_error() {
        let mut m = CachedMemory::new(2, 4, 2);
        assert!(matches!(m.push_values(&[seg(1, 0.0)]), Err(Error::Structure(_))));
        assert!(matches!(m.view_value(2), Err(Error::Index { .. })));
    }

    #[test]
    fn graph_push_detaches() {
        let mut g = Graph::standalone();
        let mut m = CachedMemory::new(1, 4, 2);
        let x = g.variable(seg(2, 1.0));
        m.push(&mut g, &[x]).unwrap();
        let v = m.view(&mut g, 0).unwrap();
        assert!(!g.requires_grad(v));
        assert_eq!(g.value(v), &seg(2, 1.0));

        let mut g2 = Graph::standalone();
        let mut broken = CachedMemory::new(1, 4, 2).without_detach();
        let x = g2.variable(seg(2, 1.0));
        broken.push(&mut g2, &[x]).unwrap();
        let v = broken.view(&mut g2, 0).unwrap();
        assert!(g2.requires_grad(v));
    }
}
