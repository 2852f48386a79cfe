use super::graph::Op;
use super::{Graph, GraphError, NodeId, Tensor};

/// An evaluation within `KINK_MARGIN_FACTOR * step` of a ReLU kink (or of a
/// zero norm) is rejected by [`finite_diff_check`].
pub const KINK_MARGIN_FACTOR: f64 = 1e3;

/// Largest `|analytic - central| / max(1, |central|)` over every parameter
/// entry reachable by the graph.
///
/// Parameter values are restored before returning, including on error.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, step: f64) -> Result<f64, GraphError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = graph.backward(loss)?;
    reject_kinks(graph, loss, step * KINK_MARGIN_FACTOR)?;

    let mut worst: f64 = 0.0;
    for (id, grad) in analytic.iter() {
        let numeric = central_difference(graph, loss, id, step)?;
        for (a, c) in grad.data().iter().zip(numeric.data()) {
            worst = worst.max((a - c).abs() / c.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Central-difference estimate of `d loss / d param`, one entry at a time.
/// The parameter value is restored before returning, including on error.
pub fn central_difference(graph: &mut Graph, loss: NodeId, param: NodeId, step: f64) -> Result<Tensor, GraphError> {
    if !graph.is_param(param) {
        return Err(GraphError::NotALeaf(param));
    }
    let original = graph.value(param).expect("parameters carry values").clone();
    let mut out = Tensor::zeros(original.shape());
    for k in 0..original.len() {
        let mut probe = original.clone();
        probe.data_mut()[k] = original.data()[k] + step;
        graph.bind(param, probe.clone())?;
        let plus = graph.forward(loss).map(|t| t.item());
        probe.data_mut()[k] = original.data()[k] - step;
        graph.bind(param, probe)?;
        let minus = graph.forward(loss).map(|t| t.item());
        graph.bind(param, original.clone())?;
        out.data_mut()[k] = (plus? - minus?) / (2.0 * step);
    }
    graph.forward(loss)?;
    Ok(out)
}

/// Fails with [`GraphError::NonSmooth`] when the current evaluation of
/// `loss` sits within `margin` of a ReLU kink or a zero norm.
pub fn reject_kinks_near(graph: &mut Graph, loss: NodeId, margin: f64) -> Result<(), GraphError> {
    graph.forward(loss)?;
    reject_kinks(graph, loss, margin)
}

fn reject_kinks(graph: &Graph, loss: NodeId, margin: f64) -> Result<(), GraphError> {
    for i in 0..=loss.index() {
        let node = &graph.nodes[i];
        let Some(value) = node.value.as_ref() else {
            continue;
        };
        let hit = match node.op {
            Op::Relu(a) => graph.nodes[a.index()]
                .value
                .as_ref()
                .is_some_and(|x| x.data().iter().any(|v| v.abs() < margin)),
            Op::L2Norm(_) | Op::RowNorms(_) => value.data().iter().any(|v| *v < margin),
            _ => false,
        };
        if hit {
            return Err(GraphError::NonSmooth {
                node: NodeId(i),
                op: node.op.name(),
            });
        }
    }
    Ok(())
}
