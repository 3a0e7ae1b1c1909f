//! Fixtures shared by the benchmarks.

use nalgebra::{DVector, Vector3};
use softstep::{ForceModel, MaterialModel, MaterialParams, RayleighParams, SecondOrderSystem, TetMesh};

/// Clamped beam of `cells[0] x cells[1] x cells[2]` hexahedra, one metre long.
pub fn clamped_beam(cells: [usize; 3]) -> ForceModel {
    let mesh = TetMesh::box_grid(cells, Vector3::new(1.0, 0.25, 0.25), Vector3::zeros())
        .and_then(|m| m.fix_where(|p| p.x == 0.0))
        .expect("valid beam mesh");
    let mat = MaterialParams::new(MaterialModel::StableNeoHookean, 1e5, 0.4, 1000.0).expect("valid material");
    ForceModel::new(mesh, mat, RayleighParams::default(), Vector3::new(0.0, 0.0, -9.81), None).expect("valid model")
}

/// Rest positions with a deterministic bend applied to the free DOFs.
pub fn bent_state(model: &ForceModel) -> DVector<f64> {
    let mut q = model.rest_state();
    let free = model.free_mask().to_vec();
    for i in (2..q.len()).step_by(3) {
        if free[i] {
            let x = q[i - 2];
            q[i] -= 0.05 * x * x;
        }
    }
    q
}
