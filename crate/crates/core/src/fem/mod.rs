//! Linear tetrahedral finite elements: lumped mass, hyperelastic energy,
//! forces, tangent stiffness and Rayleigh damping.

mod assembly;
mod material;
mod mesh;

pub use assembly::{
    build_mass_matrix, elastic_energy, elastic_force, lumped_mass, rayleigh_damping, stiffness_matrix,
    RayleighParams,
};
pub use material::{cofactor, MaterialModel, MaterialParams, Matrix9};
pub use mesh::{TetMesh, TetRest};
